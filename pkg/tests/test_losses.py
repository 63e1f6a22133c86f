import numpy as np
import pytest

from bafnet.core.errors import DataError, ShapeError
from bafnet.core.losses import ce_loss, dice_loss, hybrid_loss, one_hot, segmentation_loss
from bafnet.core.tensor import Tensor


def single_pixel(p0, p1):
    probs = Tensor(np.array([p0, p1], dtype=np.float64).reshape(1, 2, 1, 1), requires_grad=True)
    onehot = np.array([1.0, 0.0]).reshape(1, 2, 1, 1)
    return probs, onehot


class TestHandExamples:
    def test_literal_cross_entropy(self):
        probs, onehot = single_pixel(0.7, 0.3)
        assert ce_loss(probs, onehot).item() == pytest.approx(-2 * np.log(0.7), abs=1e-9)
        assert ce_loss(probs, onehot).item() == pytest.approx(0.71335, abs=1e-5)

    def test_categorical_cross_entropy(self):
        probs, onehot = single_pixel(0.7, 0.3)
        assert ce_loss(probs, onehot, mode="categorical").item() == pytest.approx(0.35667, abs=1e-5)

    def test_dice(self):
        probs, onehot = single_pixel(0.7, 0.3)
        assert dice_loss(probs, onehot).item() == pytest.approx(0.176471, abs=1e-5)

    def test_hybrid_is_sum(self):
        probs, onehot = single_pixel(0.7, 0.3)
        loss = hybrid_loss(probs, onehot)
        assert loss.total.item() == pytest.approx(loss.ce.item() + loss.dice.item())
        report = loss.report()
        assert report.total == pytest.approx(0.71335 + 0.176471, abs=1e-4)

    def test_perfect_prediction_is_near_zero(self):
        probs, onehot = single_pixel(1.0, 0.0)
        assert hybrid_loss(probs, onehot).total.item() == pytest.approx(0.0, abs=1e-5)

    def test_unknown_mode_raises(self):
        probs, onehot = single_pixel(0.7, 0.3)
        with pytest.raises(ShapeError):
            ce_loss(probs, onehot, mode="focal")


class TestWeights:
    def test_zero_weight_pixel_does_not_change_loss(self, rng):
        probs = rng.dirichlet(np.ones(3), size=(1, 2, 2)).transpose(0, 3, 1, 2)
        mask = np.array([[[0, 1], [2, 255]]])
        onehot, weight = one_hot(mask, 3, dtype=np.float64)
        full = hybrid_loss(Tensor(probs), onehot, weight).total.item()

        changed = probs.copy()
        changed[0, :, 1, 1] = [0.98, 0.01, 0.01]
        assert hybrid_loss(Tensor(changed), onehot, weight).total.item() == pytest.approx(full, abs=1e-12)

    def test_one_hot_marks_ignored_pixels(self):
        onehot, weight = one_hot(np.array([[[1, 255]]]), 3)
        np.testing.assert_array_equal(onehot[0, :, 0, 1], 0.0)
        np.testing.assert_array_equal(weight[0, 0, 0], [1.0, 0.0])
        np.testing.assert_array_equal(onehot[0, :, 0, 0], [0.0, 1.0, 0.0])

    def test_all_ignored_gives_zero_loss_with_graph(self):
        logits = Tensor(np.zeros((1, 3, 2, 2)), requires_grad=True)
        loss = segmentation_loss(logits, np.full((1, 2, 2), 255), 3)
        assert loss.total.item() == 0.0
        loss.total.backward()
        np.testing.assert_array_equal(logits.grad, 0.0)

    def test_excluded_class_is_not_scored(self, rng):
        logits = rng.normal(size=(1, 6, 2, 2))
        mask = np.array([[[0, 5], [1, 2]]])
        excluded = segmentation_loss(Tensor(logits), mask, 6, exclude_class=5).total.item()
        ignored = segmentation_loss(Tensor(logits), np.array([[[0, 255], [1, 2]]]), 6).total.item()
        assert excluded == pytest.approx(ignored)


class TestValidation:
    def test_label_out_of_range_raises(self):
        with pytest.raises(DataError):
            one_hot(np.array([[[0, 7]]]), 6)

    def test_pixel_with_two_classes_raises(self):
        probs = Tensor(np.full((1, 2, 1, 1), 0.5))
        with pytest.raises(DataError):
            ce_loss(probs, np.ones((1, 2, 1, 1)))

    def test_shape_mismatch_raises(self):
        with pytest.raises(ShapeError):
            dice_loss(Tensor(np.full((1, 2, 2, 2), 0.5)), np.zeros((1, 3, 2, 2)))

    def test_mask_must_align_with_logits(self):
        with pytest.raises(ShapeError):
            segmentation_loss(Tensor(np.zeros((1, 3, 4, 4))), np.zeros((1, 2, 2), dtype=int), 3)


class TestGradient:
    def test_gradient_lowers_loss(self, rng):
        logits = Tensor(rng.normal(size=(2, 4, 3, 3)), requires_grad=True)
        mask = rng.integers(0, 4, size=(2, 3, 3))
        loss = segmentation_loss(logits, mask, 4)
        loss.total.backward()
        stepped = Tensor(logits.data - 0.1 * logits.grad)
        assert segmentation_loss(stepped, mask, 4).total.item() < loss.total.item()


def _softmax(z):
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


class TestDiceProperties:
    @pytest.mark.parametrize("seed", range(8))
    def test_within_unit_interval(self, seed):
        rng = np.random.default_rng(seed)
        num_classes = int(rng.integers(2, 7))
        shape = (int(rng.integers(1, 4)), num_classes, int(rng.integers(1, 6)), int(rng.integers(1, 6)))
        probs = Tensor(_softmax(rng.normal(scale=3.0, size=shape)))
        onehot, weight = one_hot(rng.integers(0, num_classes, size=(shape[0],) + shape[2:]), num_classes, dtype=np.float64)
        value = dice_loss(probs, onehot, weight).item()
        assert 0.0 <= value <= 1.0

    def test_decreases_towards_target(self, rng):
        p0 = _softmax(rng.normal(size=(2, 4, 3, 3)))
        onehot, _ = one_hot(rng.integers(0, 4, size=(2, 3, 3)), 4, dtype=np.float64)
        values = [dice_loss(Tensor((1 - t) * p0 + t * onehot), onehot).item() for t in np.linspace(0.0, 1.0, 11)]
        assert all(b < a for a, b in zip(values, values[1:]))
        assert values[-1] == pytest.approx(0.0, abs=1e-5)
