import numpy as np
import pytest

from bafnet.core.complexity import count_flops, count_params
from bafnet.core.fusion import build_model
from bafnet.core.module import Conv2d, Linear, Module
from bafnet.core.profiler import FlopCounter
from bafnet.schemas.schemas import ModelConfig


class ConvThenLinear(Module):
    def __init__(self, rng):
        super().__init__()
        self.conv = Conv2d(3, 4, 3, rng)
        self.fc = Linear(4, 2, rng, bias=False)
        self.assign_scopes()

    def forward(self, x):
        y = self.conv(x)
        return self.fc(y.transpose(0, 2, 3, 1))


class TestCounting:
    def test_conv_and_linear_formulas(self, rng):
        report = count_flops(ConvThenLinear(rng), (1, 3, 8, 8), dry_run=False, depth=1)
        conv_macs = 4 * 8 * 8 * 3 * 3 * 3
        fc_macs = 8 * 8 * 4 * 2
        assert report.macs == conv_macs + fc_macs
        assert report.flops == 2 * (conv_macs + fc_macs) + 4 * 8 * 8
        costs = {m.name: m for m in report.modules}
        assert costs["conv"].macs == conv_macs
        assert costs["conv"].params == 4 * 3 * 9 + 4
        assert costs["fc"].flops == 2 * fc_macs

    def test_dry_run_matches_real_run(self, tiny_config):
        model = build_model(tiny_config)
        dry = count_flops(model, (1, 3, 64, 64), dry_run=True)
        real = count_flops(model, (1, 3, 64, 64), dry_run=False)
        assert dry.macs == real.macs
        assert dry.flops == real.flops
        assert [m.model_dump() for m in dry.modules] == [m.model_dump() for m in real.modules]

    def test_training_mode_and_statistics_restored(self, tiny_config):
        model = build_model(tiny_config)
        before = model.dep.stage1.embed.bn1.running_mean.copy()
        count_flops(model, (1, 3, 64, 64), dry_run=False)
        assert model.training
        np.testing.assert_array_equal(model.dep.stage1.embed.bn1.running_mean, before)

    def test_macs_scale_with_area(self, tiny_config):
        model = build_model(tiny_config)
        small = count_flops(model, (1, 3, 64, 64)).macs
        large = count_flops(model, (1, 3, 128, 128)).macs
        # 只有 FAM 门控卷积作用在池化后的 1×1 上，不随面积增长
        assert large == pytest.approx(4 * small, rel=1e-2)

    def test_module_totals_add_up(self, tiny_config):
        model = build_model(tiny_config)
        report = count_flops(model, (1, 3, 64, 64))
        assert sum(m.params for m in report.modules) == report.params == count_params(model)
        assert sum(m.flops for m in report.modules) == report.flops

    def test_nested_counters_rejected(self):
        with FlopCounter():
            with pytest.raises(RuntimeError):
                with FlopCounter():
                    pass


@pytest.mark.slow
class TestReferenceComplexity:
    def test_default_model_at_512(self):
        report = count_flops(build_model(ModelConfig()), (1, 3, 512, 512))
        assert report.params == pytest.approx(6.4e6, rel=0.15)
        assert report.flops == pytest.approx(12.3e9, rel=0.20)
        assert report.flops == 13_168_802_176
        assert report.macs == 6_552_226_944
