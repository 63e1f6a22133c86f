import numpy as np
import pytest

from bafnet.core import functional as F
from bafnet.core.errors import ShapeError
from bafnet.core.fusion import BafnetModel, Exchange, Fam, SumFusion, build_model, exchange
from bafnet.core.module import zero_module_
from bafnet.core.tensor import Tensor, no_grad
from bafnet.schemas.schemas import ABLATION_PRESETS, ModelConfig


class TestExchange:
    def test_matches_adapter_sum(self, rng, double):
        xch = Exchange(6, 4, 2, rng).eval()
        dep = Tensor(rng.normal(size=(1, 6, 4, 4)))
        rl = Tensor(rng.normal(size=(1, 4, 8, 8)))
        with no_grad():
            dep_fused, rl_fused = exchange(dep, rl, xch)
            np.testing.assert_allclose(dep_fused.data, dep.data + xch.into_dep(rl).data)
            np.testing.assert_allclose(rl_fused.data, rl.data + xch.into_rl(dep).data)

    def test_into_dependency_downsamples_by_ratio(self, rng):
        xch = Exchange(6, 4, 4, rng)
        assert len(xch.into_dep.down_convs()) == 2
        assert len(xch.into_rl.down_convs()) == 0
        with no_grad():
            out = xch.into_dep(Tensor(rng.normal(size=(1, 4, 16, 16)).astype(np.float32)))
        assert out.shape == (1, 6, 4, 4)

    def test_zero_init_is_identity(self, rng):
        xch = Exchange(6, 4, 2, rng).zero_init_().eval()
        dep = Tensor(rng.normal(size=(1, 6, 4, 4)).astype(np.float32))
        rl = Tensor(rng.normal(size=(1, 4, 8, 8)).astype(np.float32))
        with no_grad():
            dep_fused, rl_fused = xch(dep, rl)
        np.testing.assert_array_equal(dep_fused.data, dep.data)
        np.testing.assert_array_equal(rl_fused.data, rl.data)

    def test_ratio_must_be_power_of_two(self, rng):
        with pytest.raises(ShapeError):
            Exchange(6, 4, 3, rng)

    def test_resolution_ratio_must_match_adapter(self, rng):
        xch = Exchange(6, 4, 2, rng)
        with pytest.raises(ShapeError):
            exchange(Tensor(np.zeros((1, 6, 4, 4))), Tensor(np.zeros((1, 4, 16, 16))), xch)
        with pytest.raises(ShapeError):
            exchange(Tensor(np.zeros((1, 6, 4, 4))), Tensor(np.zeros((1, 4, 12, 12))), xch)


class TestFam:
    def test_matches_hand_computation(self, rng, double):
        fam = Fam(6, 4, rng).eval()
        low = rng.normal(size=(2, 6, 2, 2))
        high = rng.normal(size=(2, 4, 8, 8))
        with no_grad():
            out = fam(Tensor(low), Tensor(high)).data

        w = fam.low_proj.weight.data[:, :, 0, 0]
        projected = np.einsum("oc,bchw->bohw", w, low) + fam.low_proj.bias.data[None, :, None, None]
        up = F.resize_bilinear_array(projected, 8, 8)
        fused = np.concatenate([up, high], axis=1)
        ww = fam.weight_proj.weight.data[:, :, 0, 0]
        pooled = (np.einsum("oc,bchw->bohw", ww, fused) + fam.weight_proj.bias.data[None, :, None, None]).mean(axis=(2, 3))
        # 1×1 输入上 5×5 深度卷积只有中心一个抽头有效
        gated = pooled * fam.gate_conv.weight.data[:, 0, 2, 2] + fam.gate_conv.bias.data
        gated = gated / np.sqrt(1.0 + F.BN_EPS)
        gate = 1.0 / (1.0 + np.exp(-gated))
        np.testing.assert_allclose(out, gate[:, :, None, None] * fused, atol=1e-10)

    def test_zeroed_gate_halves_fused_features(self, rng, double):
        fam = Fam(6, 4, rng).eval()
        zero_module_(fam.weight_proj)
        zero_module_(fam.gate_conv)
        low = Tensor(rng.normal(size=(2, 6, 2, 2)))
        high = Tensor(rng.normal(size=(2, 4, 8, 8)))
        with no_grad():
            out = fam(low, high).data
            fused = fam.fuse_features(low, high).data
        np.testing.assert_allclose(fam.last_gate, np.full((2, 8, 1, 1), 0.5))
        np.testing.assert_allclose(out, 0.5 * fused, atol=1e-12)

    def test_gate_values_in_unit_interval(self, rng):
        fam = Fam(6, 4, rng)
        fam(Tensor(rng.normal(size=(2, 6, 2, 2)).astype(np.float32)), Tensor(rng.normal(size=(2, 4, 8, 8)).astype(np.float32)))
        assert fam.last_gate.shape == (2, 8, 1, 1)
        assert np.all((fam.last_gate > 0.0) & (fam.last_gate < 1.0))

    def test_size_mismatch_raises(self, rng):
        with pytest.raises(ShapeError):
            Fam(6, 4, rng)(Tensor(np.zeros((1, 6, 2, 2))), Tensor(np.zeros((1, 4, 6, 6))))


class TestSumFusion:
    def test_adds_upsampled_low(self, rng, double):
        fusion = SumFusion(6, 4, rng)
        low = rng.normal(size=(1, 6, 2, 2))
        high = rng.normal(size=(1, 4, 8, 8))
        with no_grad():
            out = fusion(Tensor(low), Tensor(high)).data
            up = F.bilinear_resize(fusion.low_proj(Tensor(low)), factor=4).data
        np.testing.assert_allclose(out, up + high)


class TestBafnetModel:
    def test_tiny_model_output_shape(self, tiny_config, rng):
        model = build_model(tiny_config)
        logits = model(Tensor(rng.normal(size=(1, 3, 64, 64)).astype(np.float32)))
        assert logits.shape == (1, 6, 64, 64)

    def test_tiny_dependency_only_model(self, tiny_cp_config, rng):
        model = build_model(tiny_cp_config)
        assert not hasattr(model, "rl")
        assert model.head.upsample == 32
        assert model(Tensor(rng.normal(size=(1, 3, 64, 64)).astype(np.float32))).shape == (1, 6, 64, 64)

    def test_feature_metadata(self, tiny_config, rng):
        model = build_model(tiny_config)
        with no_grad():
            bundle = model.forward_features(Tensor(rng.normal(size=(1, 3, 64, 64)).astype(np.float32)))
        meta = bundle.metadata()
        assert [meta[f"dep.stage{i}"]["reduction"] for i in range(1, 5)] == [4, 8, 16, 32]
        assert all(meta[f"rl.stage{n}"] == {"channels": 16, "reduction": 8} for n in "ABC")
        assert bundle.high.shape == (1, 16, 8, 8)

    def test_zero_exchange_equals_network_without_exchange(self, tiny_config, rng, double):
        model = build_model(tiny_config).eval()
        model.xch1.zero_init_()
        model.xch2.zero_init_()
        image = Tensor(rng.normal(size=(1, 3, 64, 64)))
        with no_grad():
            logits = model(image).data
            s2 = model.dep.stage(2, model.dep.stage(1, image))
            s3 = model.dep.stage(3, s2)
            ra = model.rl.stage("A", model.rl.enter(s2))
            s4 = model.dep.stage(4, s3)
            rc = model.rl.stage("C", model.rl.stage("B", ra))
            expected = model.head(model.fam(s4, rc)).data
        np.testing.assert_allclose(logits, expected, atol=1e-12)

    def test_input_multiple_enforced(self, tiny_config):
        with pytest.raises(ShapeError):
            build_model(tiny_config)(Tensor(np.zeros((1, 3, 48, 48), dtype=np.float32)))

    def test_wrong_channel_count_raises(self, tiny_config):
        with pytest.raises(ShapeError):
            build_model(tiny_config)(Tensor(np.zeros((1, 4, 64, 64), dtype=np.float32)))

    def test_same_seed_same_weights(self, tiny_config):
        a, b = build_model(tiny_config), build_model(tiny_config)
        for (na, pa), (nb, pb) in zip(a.named_parameters(), b.named_parameters()):
            assert na == nb
            np.testing.assert_array_equal(pa.data, pb.data)

    def test_parameter_prefixes(self, tiny_config):
        prefixes = {name.split(".")[0] for name in build_model(tiny_config).param_registry()}
        assert prefixes == {"dep", "rl", "xch1", "xch2", "fam", "head"}


class TestParameterCounts:
    def test_full_model(self):
        assert build_model(ModelConfig()).param_registry().num_elements() == 6_656_054

    def test_dependency_only_model(self):
        assert build_model(ModelConfig.preset("cp")).param_registry().num_elements() == 5_009_830

    def test_ablation_ordering(self):
        counts = {name: BafnetModel(ModelConfig.preset(name)).param_registry().num_elements() for name in ABLATION_PRESETS}
        assert counts["cp"] < counts["cp_la"] < counts["cp_ra_la_sum"]
        assert counts["cp"] < counts["cp_ra"] < counts["cp_ra_la_sum"] < counts["full"]

    def test_resnet_backbone_rejects_remote_local(self):
        with pytest.raises(ValueError):
            ModelConfig(backbone="resnet18_stub")
