import numpy as np
import pytest

from bafnet.core.dependency_path import DependencyPath, LargeKernelAttention, VanBlock, dependency_forward
from bafnet.core.errors import ShapeError
from bafnet.core.module import zero_module_
from bafnet.core.resnet import ResNet18Stub
from bafnet.core.tensor import Tensor, no_grad
from bafnet.schemas.schemas import ModelConfig


@pytest.fixture
def tiny_path(rng):
    return DependencyPath(3, (8, 16, 32, 32), (1, 1, 1, 1), (2, 2, 2, 2), rng)


class TestLargeKernelAttention:
    def test_receptive_radius(self, rng):
        assert LargeKernelAttention(4, rng).receptive_radius() == 11
        assert LargeKernelAttention(4, rng, kernel=3, dilated_kernel=5, dilation=2).receptive_radius() == 5

    def test_response_is_local(self, rng, double):
        lka = LargeKernelAttention(4, rng)
        x = rng.normal(size=(1, 4, 40, 40))
        bumped = x.copy()
        bumped[0, 1, 20, 20] += 1.0
        with no_grad():
            diff = np.abs(lka.attention_map(Tensor(bumped)).data - lka.attention_map(Tensor(x)).data).max(axis=(0, 1))
        ys, xs = np.nonzero(diff > 1e-12)
        reach = np.maximum(np.abs(ys - 20), np.abs(xs - 20))
        assert reach.max() == 11
        assert diff[31, 31] > 0.0

    def test_wrong_channels_raise(self, rng):
        with pytest.raises(ShapeError):
            LargeKernelAttention(4, rng).attention_map(Tensor(np.zeros((1, 3, 8, 8))))

    def test_gating_multiplies_input(self, rng, double):
        lka = LargeKernelAttention(2, rng)
        x = Tensor(rng.normal(size=(1, 2, 9, 9)))
        with no_grad():
            np.testing.assert_allclose(lka(x).data, lka.attention_map(x).data * x.data)


class TestVanBlock:
    def test_preserves_shape(self, rng):
        block = VanBlock(8, 2, rng)
        out = block(Tensor(rng.normal(size=(2, 8, 6, 6)).astype(np.float32)))
        assert out.shape == (2, 8, 6, 6)

    def test_zeroed_output_projections_give_identity(self, rng, double):
        block = VanBlock(8, 2, rng)
        for layer in block.output_layers():
            zero_module_(layer)
        x = Tensor(rng.normal(size=(2, 8, 6, 6)))
        with no_grad():
            np.testing.assert_array_equal(block(x).data, x.data)

    def test_channel_mismatch_raises(self, rng):
        with pytest.raises(ShapeError):
            VanBlock(8, 2, rng)(Tensor(np.zeros((1, 4, 6, 6), dtype=np.float32)))


class TestDependencyPath:
    def test_stage_shapes(self, tiny_path, rng):
        feats = dependency_forward(tiny_path, Tensor(rng.normal(size=(2, 3, 64, 64)).astype(np.float32)))
        assert [f.shape for f in feats] == [(2, 8, 16, 16), (2, 16, 8, 8), (2, 32, 4, 4), (2, 32, 2, 2)]

    def test_input_not_divisible_raises(self, tiny_path):
        with pytest.raises(ShapeError):
            tiny_path(Tensor(np.zeros((1, 3, 48, 48), dtype=np.float32)))

    def test_published_ratio_parameter_count(self, rng):
        path = DependencyPath(3, (32, 64, 160, 256), (3, 3, 5, 2), (8, 8, 4, 4), rng)
        assert path.param_registry().num_elements() == 3_845_984

    def test_default_parameter_count(self, rng):
        cfg = ModelConfig()
        path = DependencyPath(3, cfg.dep_channels, cfg.dep_depths, cfg.dep_mlp_ratios, rng)
        assert path.param_registry().num_elements() == 4_713_760

    def test_parameter_names_are_hierarchical(self, tiny_path):
        names = list(tiny_path.param_registry())
        assert names[0] == "stage1.embed.conv1.weight"
        assert "stage2.block0.attn.lka.dwd.weight" in names
        assert names[-1] == "stage4.norm.bias"


class TestResNetStub:
    def test_stage_shapes(self, rng):
        stub = ResNet18Stub(3, (8, 16, 32, 64), rng)
        feats = stub(Tensor(rng.normal(size=(1, 3, 64, 64)).astype(np.float32)))
        assert [f.shape for f in feats] == [(1, 8, 16, 16), (1, 16, 8, 8), (1, 32, 4, 4), (1, 64, 2, 2)]
