import numpy as np
import pytest

from bafnet.core.checkpoint import load_checkpoint, save_checkpoint
from bafnet.core.errors import CheckpointError, ConfigError, ShapeError
from bafnet.core.fusion import build_model
from bafnet.core.module import Parameter
from bafnet.core.optim import AdamW, adamw_step, cosine_lr
from bafnet.schemas.schemas import ModelConfig, TrainConfig
from bafnet.utils.file_utils import read_tensor_archive, write_tensor_archive


class TestCosineSchedule:
    def test_reference_values(self):
        assert cosine_lr(0, 100, 2e-4) == pytest.approx(2e-4)
        assert cosine_lr(50, 100, 2e-4) == pytest.approx(1e-4)
        assert cosine_lr(100, 100, 2e-4) == pytest.approx(0.0, abs=1e-20)

    def test_monotone_non_increasing(self):
        values = [cosine_lr(t, 37, 1.0) for t in range(38)]
        assert all(a >= b for a, b in zip(values, values[1:]))
        assert min(values) >= 0.0

    def test_invalid_arguments(self):
        with pytest.raises(ConfigError):
            cosine_lr(0, 0, 1.0)
        with pytest.raises(ConfigError):
            cosine_lr(11, 10, 1.0)


class TestAdamW:
    def test_first_step_moves_by_learning_rate(self):
        p = Parameter(np.array([1.0, 1.0]))
        p.grad = np.array([0.3, -2.0], dtype=p.dtype)
        AdamW([p], lr=0.1, weight_decay=0.0).step()
        np.testing.assert_allclose(p.data, [0.9, 1.1], rtol=1e-6)

    def test_zero_gradient_leaves_parameter(self):
        p = Parameter(np.array([0.5, -0.25]))
        before = p.data.copy()
        opt = AdamW([p], lr=0.1, weight_decay=0.0)
        opt.step()
        np.testing.assert_array_equal(p.data, before)

    def test_decoupled_weight_decay(self):
        p = Parameter(np.array([2.0]))
        p.grad = np.zeros(1, dtype=p.dtype)
        AdamW([p], lr=0.5, weight_decay=0.1).step()
        np.testing.assert_allclose(p.data, [2.0 * 0.95], rtol=1e-6)

    def test_no_decay_parameters_skip_weight_decay(self):
        p = Parameter(np.array([2.0]), no_decay=True)
        p.grad = np.zeros(1, dtype=p.dtype)
        AdamW([p], lr=0.5, weight_decay=0.1).step()
        np.testing.assert_array_equal(p.data, [2.0])

    def test_shape_mismatch_raises(self):
        with pytest.raises(ShapeError):
            adamw_step(np.zeros(3), np.zeros(2), np.zeros(3), np.zeros(3), 1, 0.1)

    def test_bias_correction_uses_step_count(self):
        param, m, v = np.array([0.0]), np.zeros(1), np.zeros(1)
        for step in (1, 2):
            adamw_step(param, np.array([1.0]), m, v, step, 0.01)
        np.testing.assert_allclose(param, [-0.02], rtol=1e-6)

    def test_grad_norm(self):
        a, b = Parameter(np.zeros(2)), Parameter(np.zeros(1))
        a.grad = np.array([3.0, 0.0])
        b.grad = np.array([4.0])
        assert AdamW([a, b]).grad_norm() == pytest.approx(5.0)

    def test_state_roundtrip(self):
        p = Parameter(np.ones(3))
        p.grad = np.array([0.1, 0.2, 0.3], dtype=p.dtype)
        opt = AdamW([p])
        opt.step()
        fresh = AdamW([Parameter(np.ones(3))])
        fresh.load_state_arrays(opt.state_arrays(), opt.step_count)
        np.testing.assert_array_equal(fresh.m[0], opt.m[0])
        assert fresh.step_count == 1
        with pytest.raises(ShapeError):
            AdamW([Parameter(np.ones(2))]).load_state_arrays(opt.state_arrays(), 1)


class TestCheckpoint:
    @pytest.fixture
    def trained(self, tiny_config, rng):
        model = build_model(tiny_config)
        opt = AdamW(model.parameters(), lr=1e-3)
        for p in model.parameters():
            p.grad = rng.normal(size=p.shape).astype(p.dtype)
        opt.step()
        return model, opt

    def test_roundtrip_is_bit_exact(self, tmp_path, trained, tiny_config):
        model, opt = trained
        rng = np.random.default_rng(99)
        rng.random(5)
        path = str(tmp_path / "ckpt.bafnet")
        save_checkpoint(path, model, opt, epoch=2, step=10, rng=rng, train_config=TrainConfig(seed=1))
        ckpt = load_checkpoint(path, expected=tiny_config)
        assert (ckpt.epoch, ckpt.step, ckpt.optim_steps) == (2, 10, 1)
        assert ckpt.train_config.seed == 1
        restored = ckpt.build_model()
        for (name, a), (_, b) in zip(model.state_arrays().items(), restored.state_arrays().items()):
            assert a.dtype == b.dtype, name
            np.testing.assert_array_equal(a, b)
        fresh = AdamW(restored.parameters(), lr=1e-3)
        ckpt.restore_optimizer(fresh)
        for m_a, m_b in zip(opt.m, fresh.m):
            np.testing.assert_array_equal(m_a, m_b)
        assert ckpt.generator().random() == rng.random()

    def test_corrupt_archive_raises(self, tmp_path):
        path = tmp_path / "broken.bafnet"
        path.write_bytes(b"PK\x03\x04 truncated")
        with pytest.raises(CheckpointError):
            load_checkpoint(str(path))

    def test_config_mismatch_raises(self, tmp_path, trained, tiny_config):
        model, _ = trained
        path = str(tmp_path / "ckpt.bafnet")
        save_checkpoint(path, model)
        with pytest.raises(CheckpointError):
            load_checkpoint(path, expected=tiny_config.model_copy(update={"init_seed": 5}))

    def test_tampered_hash_raises(self, tmp_path, trained):
        model, _ = trained
        path = str(tmp_path / "ckpt.bafnet")
        save_checkpoint(path, model)
        arrays, meta = read_tensor_archive(path)
        meta["model_config"]["num_heads"] = 4
        write_tensor_archive(path, arrays, meta)
        with pytest.raises(CheckpointError):
            load_checkpoint(path)

    def test_structure_mismatch_raises_on_build(self, tmp_path, trained):
        model, _ = trained
        path = str(tmp_path / "ckpt.bafnet")
        save_checkpoint(path, model)
        ckpt = load_checkpoint(path)
        ckpt.model_state.popitem()
        with pytest.raises(CheckpointError):
            ckpt.build_model()

    def test_default_config_hash_is_stable(self):
        assert ModelConfig().config_hash() == ModelConfig().config_hash()
        assert ModelConfig().config_hash() != ModelConfig.preset("cp").config_hash()
