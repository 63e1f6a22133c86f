import numpy as np
import pytest

from bafnet.core.data import (
    DEFAULT_PALETTE,
    IGNORE_INDEX,
    ClassPalette,
    Stitcher,
    TileSample,
    augment,
    class_histogram,
    predict_probs,
    resize_nearest,
    split_train_val,
    synth_generate,
    tile,
    tile_starts,
    tiled_predict,
    tta_predict,
    tta_variants,
)
from bafnet.core.errors import DataError, ShapeError
from bafnet.core.fusion import build_model
from bafnet.core.module import Module
from bafnet.core.tensor import Tensor
from bafnet.schemas.schemas import TrainConfig


class ConstantLogits(Module):
    """与输入无关、逐类别为常数的 logits"""

    def __init__(self, values):
        super().__init__()
        self.values = np.asarray(values, dtype=np.float32)

    def forward(self, x):
        b, _, h, w = x.shape
        return Tensor(np.broadcast_to(self.values[None, :, None, None], (b, len(self.values), h, w)).copy())


class TestPalette:
    def test_encode_decode_roundtrip(self, rng):
        mask = rng.integers(0, 6, size=(7, 9)).astype(np.uint8)
        np.testing.assert_array_equal(DEFAULT_PALETTE.decode(DEFAULT_PALETTE.encode(mask)), mask)

    def test_zero_mask_encodes_uniformly(self):
        rgb = DEFAULT_PALETTE.encode(np.zeros((4, 4), dtype=np.uint8))
        assert rgb.dtype == np.uint8
        np.testing.assert_array_equal(rgb.reshape(-1, 3), [[255, 255, 255]] * 16)

    def test_unknown_colour_reports_location(self):
        rgb = DEFAULT_PALETTE.encode(np.zeros((4, 5), dtype=np.uint8))
        rgb[2, 3] = (1, 2, 3)
        rgb[3, 4] = (9, 9, 9)
        with pytest.raises(DataError, match=r"\(2, 3\)") as info:
            DEFAULT_PALETTE.decode(rgb)
        assert "2 个未知像素" in str(info.value)

    def test_duplicate_colours_rejected(self):
        with pytest.raises(DataError):
            ClassPalette([(0, 0, 0), (0, 0, 0)], ["a", "b"])

    def test_encode_rejects_out_of_range(self):
        with pytest.raises(DataError):
            DEFAULT_PALETTE.encode(np.array([[6]]))


class TestTiling:
    def test_tile_starts(self):
        assert tile_starts(1024, 512, 512) == [0, 512]
        assert tile_starts(600, 512, 512) == [0, 512]
        assert tile_starts(512, 512, 256) == [0]
        assert tile_starts(100, 64, 32) == [0, 32, 64]

    def test_exact_grid(self):
        image = np.zeros((3, 1024, 1024), dtype=np.float32)
        tiles = tile(image, np.zeros((1024, 1024), dtype=np.uint8), 512, 512)
        assert len(tiles) == 4
        assert [t.offset for t in tiles] == [(0, 0), (0, 512), (512, 0), (512, 512)]
        assert all(t.valid == (512, 512) for t in tiles)

    def test_padded_grid_covers_every_pixel_once(self, rng):
        mask = rng.integers(0, 6, size=(600, 600)).astype(np.uint8)
        image = rng.random((3, 600, 600)).astype(np.float32)
        tiles = tile(image, mask, 512, 512)
        assert len(tiles) == 4
        coverage = np.zeros((600, 600), dtype=int)
        for t in tiles:
            y, x = t.offset
            vh, vw = t.valid
            coverage[y:y + vh, x:x + vw] += 1
            np.testing.assert_array_equal(t.mask[:vh, :vw], mask[y:y + vh, x:x + vw])
            assert np.all(t.mask[vh:, :] == IGNORE_INDEX) and np.all(t.mask[:, vw:] == IGNORE_INDEX)
            assert t.image.shape == (3, 512, 512)
        assert np.all(coverage == 1)

    def test_mirror_padding(self):
        image = np.arange(5, dtype=np.float32).reshape(1, 1, 5).repeat(3, axis=0).repeat(5, axis=1)
        tiles = tile(image, np.zeros((5, 5), dtype=np.uint8), 4, 4)
        right = tiles[1].image[0, 0]
        np.testing.assert_array_equal(right, [4, 4, 3, 2])

    def test_identity_stitch_reproduces_mask(self, rng):
        mask = rng.integers(0, 6, size=(70, 50)).astype(np.uint8)
        image = np.zeros((3, 70, 50), dtype=np.float32)
        stitcher = Stitcher(6, 70, 50)
        for t in tile(image, mask, 32, 32):
            onehot = np.eye(6)[np.where(t.mask == IGNORE_INDEX, 0, t.mask)].transpose(2, 0, 1)
            stitcher.add(onehot, t.offset, t.valid)
        np.testing.assert_array_equal(stitcher.mask(), mask)
        assert stitcher.coverage.max() == 1

    def test_overlapping_tiles_are_averaged(self, rng):
        image = rng.random((3, 45, 61))
        out = tiled_predict(lambda batch: batch * 1.0, image, 3, 32, 20)
        np.testing.assert_allclose(out, image, atol=1e-12)

    def test_uncovered_pixel_raises(self):
        with pytest.raises(DataError):
            Stitcher(2, 4, 4).result()

    def test_invalid_arguments(self):
        with pytest.raises(DataError):
            tile(np.zeros((3, 0, 4)), np.zeros((0, 4)), 4, 4)
        with pytest.raises(ShapeError):
            tile(np.zeros((3, 8, 8)), np.zeros((8, 8)), 4, 5)
        with pytest.raises(ShapeError):
            tile(np.zeros((3, 8, 8)), np.zeros((8, 7)), 4, 4)

    def test_tile_sample_alignment_checked(self):
        with pytest.raises(ShapeError):
            TileSample(image=np.zeros((3, 4, 4)), mask=np.zeros((4, 5), dtype=np.uint8))


class TestAugment:
    @pytest.fixture
    def sample(self, rng):
        return TileSample(
            image=rng.random((3, 16, 16)).astype(np.float32),
            mask=rng.integers(0, 6, size=(16, 16)).astype(np.uint8),
        )

    def test_all_probabilities_zero_is_identity(self, sample, rng):
        config = TrainConfig(aug_scale_prob=0.0, aug_hflip_prob=0.0, aug_vflip_prob=0.0, aug_rotate_prob=0.0)
        out = augment(sample, rng, config)
        np.testing.assert_array_equal(out.image, sample.image)
        np.testing.assert_array_equal(out.mask, sample.mask)

    def test_flips_and_rotation_preserve_histogram(self, sample, rng):
        config = TrainConfig(aug_scale_prob=0.0, aug_hflip_prob=1.0, aug_vflip_prob=1.0, aug_rotate_prob=1.0)
        out = augment(sample, rng, config)
        np.testing.assert_array_equal(class_histogram(out.mask), class_histogram(sample.mask))
        # 图像与掩码做同一变换：每个像素的颜色仍对应原来的类别
        pairs_in = {(tuple(sample.image[:, y, x]), sample.mask[y, x]) for y in range(16) for x in range(16)}
        pairs_out = {(tuple(out.image[:, y, x]), out.mask[y, x]) for y in range(16) for x in range(16)}
        assert pairs_in == pairs_out

    def test_scaling_keeps_size_and_labels(self, sample, rng):
        config = TrainConfig(aug_scales=[0.5, 1.5], aug_hflip_prob=0.0, aug_vflip_prob=0.0, aug_rotate_prob=0.0)
        for _ in range(4):
            out = augment(sample, rng, config)
            assert out.image.shape == (3, 16, 16) and out.mask.shape == (16, 16)
            assert set(np.unique(out.mask)) <= set(np.unique(sample.mask)) | {IGNORE_INDEX}

    def test_downscale_pads_with_ignore(self, sample, rng):
        config = TrainConfig(aug_scales=[0.5], aug_hflip_prob=0.0, aug_vflip_prob=0.0, aug_rotate_prob=0.0)
        out = augment(sample, rng, config)
        assert np.all(out.mask[8:, :] == IGNORE_INDEX)
        assert np.all(out.image[:, 8:, :] == 0.0)

    def test_resize_nearest_picks_existing_values(self):
        mask = np.array([[0, 1], [2, 3]])
        np.testing.assert_array_equal(resize_nearest(mask, 4, 4), np.repeat(np.repeat(mask, 2, 0), 2, 1))


class TestTta:
    def test_variants(self):
        assert tta_variants([1.0], False) == [(1.0, None)]
        assert len(tta_variants([0.5, 1.0], True)) == 6

    def test_singleton_is_bit_exact(self, tiny_config, rng):
        model = build_model(tiny_config).eval()
        image = rng.random((1, 3, 64, 64)).astype(np.float32)
        np.testing.assert_array_equal(tta_predict(model, image), predict_probs(model, image))

    def test_average_of_variants(self, tiny_config, rng):
        model = build_model(tiny_config)
        image = rng.random((1, 3, 64, 64)).astype(np.float32)
        averaged, variants = tta_predict(model, image, scales=(1.0, 1.5), flips=True, keep_variants=True)
        assert len(variants) == 6
        np.testing.assert_allclose(averaged, np.mean(variants, axis=0), rtol=1e-6, atol=1e-7)
        assert averaged.shape == (1, 6, 64, 64)
        np.testing.assert_allclose(averaged.sum(axis=1), 1.0, atol=1e-4)
        # 恢复原来的训练模式
        assert model.training

    def test_constant_model_is_invariant(self, rng):
        model = ConstantLogits([0.1, 2.0, -1.0])
        image = rng.random((2, 3, 40, 40)).astype(np.float32)
        plain = predict_probs(model, image)
        augmented = tta_predict(model, image, scales=(0.5, 1.0, 1.25), flips=True)
        np.testing.assert_allclose(augmented, plain, atol=1e-6)


class TestSynthetic:
    def test_deterministic(self):
        a = synth_generate(7, 2, 64)
        b = synth_generate(7, 2, 64)
        for x, y in zip(a, b):
            np.testing.assert_array_equal(x.image, y.image)
            np.testing.assert_array_equal(x.mask, y.mask)
        assert a[1].source == "synth_7_0001"

    def test_scene_independent_of_count(self):
        np.testing.assert_array_equal(synth_generate(7, 1, 64)[0].mask, synth_generate(7, 3, 64)[0].mask)

    def test_types_and_ranges(self):
        s = synth_generate(0, 1, 64)[0]
        assert s.image.dtype == np.float32 and s.image.shape == (3, 64, 64)
        assert s.mask.dtype == np.uint8
        assert s.image.min() >= 0.0 and s.image.max() <= 1.0
        assert set(np.unique(s.mask)) <= set(range(6))

    def test_class_statistics(self):
        samples = synth_generate(11, 20, 128)
        present = np.array([[np.any(s.mask == k) for k in range(6)] for s in samples])
        assert np.all(present.mean(axis=0) >= 0.9)
        hist = sum(class_histogram(s.mask) for s in samples)
        assert hist[4] / hist.sum() < 0.05

    def test_split_train_val(self):
        samples = synth_generate(1, 10, 32)
        train, val = split_train_val(samples, 0.2, seed=5)
        assert len(train) == 8 and len(val) == 2
        assert {s.source for s in train}.isdisjoint({s.source for s in val})
        again = split_train_val(samples, 0.2, seed=5)[1]
        assert [s.source for s in again] == [s.source for s in val]

    def test_split_empty_raises(self):
        with pytest.raises(DataError):
            split_train_val([], 0.1, seed=0)
