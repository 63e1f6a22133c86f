"""
双路径融合与整网组装

- 路径交换：依赖路径第 3、4 阶段与远程-局部路径 A、B 阶段双向交换（1×1 卷积 + BN，再上/下采样后相加）
- FAM：U₄(conv1×1(low)) 与 high 拼接，用 GAP 得到的通道权重门控
- 分割头：3×3 卷积（通道减半）+ BN + ReLU → 1×1 卷积 → 双线性上采样
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from bafnet.core import functional as F
from bafnet.core.dependency_path import DependencyPath, check_divisible
from bafnet.core.errors import ShapeError
from bafnet.core.module import BatchNorm2d, Conv2d, Module, zero_module_
from bafnet.core.remote_local import RemoteLocalPath
from bafnet.core.resnet import ResNet18Stub
from bafnet.core.tensor import Tensor
from bafnet.schemas.schemas import ModelConfig

logger = logging.getLogger(__name__)

INTO_REMOTE_LOCAL = "into_remote_local"
INTO_DEPENDENCY = "into_dependency"


def _log2_ratio(ratio: int) -> int:
    steps = int(round(math.log2(ratio))) if ratio > 0 else -1
    if steps < 1 or 2 ** steps != ratio:
        raise ShapeError(f"两条路径的分辨率之比 {ratio} 不是 2 的正整数次幂")
    return steps


class ExchangeAdapter(Module):
    """
    把一条路径的特征对齐到另一条路径

    into_remote_local：1×1 卷积 + BN，再双线性上采样 ratio 倍；
    into_dependency：1×1 卷积 + BN，再接 log₂(ratio) 个 stride-2 的 3×3 卷积（中间 ReLU）。
    """

    def __init__(self, in_channels: int, out_channels: int, direction: str, ratio: int, rng: np.random.Generator):
        super().__init__()
        if direction not in (INTO_REMOTE_LOCAL, INTO_DEPENDENCY):
            raise ShapeError(f"未知的交换方向: {direction}")
        self.direction, self.ratio = direction, ratio
        steps = _log2_ratio(ratio)
        self.proj = Conv2d(in_channels, out_channels, 1, rng)
        self.proj_bn = BatchNorm2d(out_channels)
        self.num_down = steps if direction == INTO_DEPENDENCY else 0
        for i in range(self.num_down):
            setattr(self, f"down{i}", Conv2d(out_channels, out_channels, 3, rng, stride=2))
            setattr(self, f"down{i}_bn", BatchNorm2d(out_channels))

    def down_convs(self) -> List[Conv2d]:
        return [getattr(self, f"down{i}") for i in range(self.num_down)]

    def forward(self, x: Tensor) -> Tensor:
        y = self.proj_bn(self.proj(x))
        if self.direction == INTO_REMOTE_LOCAL:
            return F.bilinear_resize(y, factor=self.ratio)
        for i in range(self.num_down):
            y = getattr(self, f"down{i}_bn")(getattr(self, f"down{i}")(F.relu(y) if i else y))
        return y


class Exchange(Module):
    """dep_fused = dep + down(proj(rl))；rl_fused = rl + up(proj(dep))"""

    def __init__(self, dep_channels: int, rl_channels: int, ratio: int, rng: np.random.Generator):
        super().__init__()
        self.ratio = ratio
        self.into_rl = ExchangeAdapter(dep_channels, rl_channels, INTO_REMOTE_LOCAL, ratio, rng)
        self.into_dep = ExchangeAdapter(rl_channels, dep_channels, INTO_DEPENDENCY, ratio, rng)

    def zero_init_(self) -> "Exchange":
        zero_module_(self)
        return self

    def forward(self, dep: Tensor, rl: Tensor) -> Tuple[Tensor, Tensor]:
        return exchange(dep, rl, self)


def exchange(dep: Tensor, rl: Tensor, adapters: Exchange) -> Tuple[Tensor, Tensor]:
    """
    双向交换

    Raises:
        ShapeError: 分辨率之比不是 2 的幂、与适配器不符，或对齐后的形状与目标不一致
    """
    if dep.ndim != 4 or rl.ndim != 4:
        raise ShapeError(f"交换需要两个 4 维特征图，实际 {dep.shape} / {rl.shape}")
    if rl.shape[2] % dep.shape[2]:
        raise ShapeError(f"分辨率之比不是整数: {rl.shape[2:]} / {dep.shape[2:]}")
    ratio = rl.shape[2] // dep.shape[2]
    _log2_ratio(ratio)
    if ratio != adapters.ratio:
        raise ShapeError(f"分辨率之比 {ratio} 与适配器配置 {adapters.ratio} 不符")
    to_rl = adapters.into_rl(dep)
    to_dep = adapters.into_dep(rl)
    if to_rl.shape != rl.shape or to_dep.shape != dep.shape:
        raise ShapeError(f"交换后形状不一致: {to_rl.shape} vs {rl.shape}, {to_dep.shape} vs {dep.shape}")
    return dep + to_dep, rl + to_rl


class Fam(Module):
    """
    特征聚合模块

    low′ = U₄(Conv1×1(low))；FuseFeat = Concat(low′, high)；
    OutPut = sigmoid(BN(Conv5×5(GAP(W ∗ FuseFeat)))) ⊙ FuseFeat。
    W 为 1×1 卷积；5×5 门控卷积作用在 1×1 的池化结果上（padding 2，深度卷积）。
    """

    def __init__(self, low_channels: int, high_channels: int, rng: np.random.Generator, gate_kernel: int = 5):
        super().__init__()
        fused = 2 * high_channels
        self.fused_channels = fused
        self.low_proj = Conv2d(low_channels, high_channels, 1, rng)
        self.weight_proj = Conv2d(fused, fused, 1, rng)
        self.gate_conv = Conv2d(fused, fused, gate_kernel, rng, groups=fused)
        self.gate_bn = BatchNorm2d(fused)
        self.last_gate: Optional[np.ndarray] = None

    def fuse_features(self, low: Tensor, high: Tensor) -> Tensor:
        up = F.bilinear_resize(self.low_proj(low), factor=4)
        if up.shape[2:] != high.shape[2:]:
            raise ShapeError(f"U₄ 之后的 low 尺寸 {up.shape[2:]} 与 high {high.shape[2:]} 不一致")
        return F.concat([up, high], axis=1)

    def channel_weights(self, fused: Tensor) -> Tensor:
        """(B,2C,1,1)，取值在 (0,1)"""
        return F.sigmoid(self.gate_bn(self.gate_conv(F.global_avg_pool(self.weight_proj(fused)))))

    def forward(self, low: Tensor, high: Tensor) -> Tensor:
        fused = self.fuse_features(low, high)
        gate = self.channel_weights(fused)
        self.last_gate = gate.data
        return gate * fused


def fam(low: Tensor, high: Tensor, module: Fam) -> Tensor:
    return module(low, high)


class SumFusion(Module):
    """U₄(Conv1×1(low)) + high，保持 high 的通道数"""

    def __init__(self, low_channels: int, high_channels: int, rng: np.random.Generator):
        super().__init__()
        self.low_proj = Conv2d(low_channels, high_channels, 1, rng)

    def forward(self, low: Tensor, high: Tensor) -> Tensor:
        up = F.bilinear_resize(self.low_proj(low), factor=4)
        if up.shape != high.shape:
            raise ShapeError(f"求和融合形状不一致: {up.shape} vs {high.shape}")
        return up + high


class SegHead(Module):
    def __init__(self, in_channels: int, num_classes: int, upsample: int, rng: np.random.Generator):
        super().__init__()
        mid = in_channels // 2
        self.in_channels, self.mid_channels, self.upsample = in_channels, mid, upsample
        self.conv = Conv2d(in_channels, mid, 3, rng)
        self.bn = BatchNorm2d(mid)
        self.cls = Conv2d(mid, num_classes, 1, rng)

    def forward(self, x: Tensor) -> Tensor:
        if x.ndim != 4 or x.shape[1] != self.in_channels:
            raise ShapeError(f"分割头期望 {self.in_channels} 通道，实际 {x.shape}")
        logits = self.cls(F.relu(self.bn(self.conv(x))))
        return F.bilinear_resize(logits, factor=self.upsample)


@dataclass
class FeatureBundle:
    """两条路径各阶段的输出；dep 为交换前的原始阶段输出，low/high 为送入融合的特征"""

    image_size: Tuple[int, int]
    dep: List[Tensor]
    rl: List[Tensor] = field(default_factory=list)
    low: Optional[Tensor] = None
    high: Optional[Tensor] = None
    contexts: Optional[List[Dict[str, np.ndarray]]] = None

    def metadata(self) -> Dict[str, Dict[str, int]]:
        h = self.image_size[0]
        meta = {}
        for i, t in enumerate(self.dep, start=1):
            meta[f"dep.stage{i}"] = {"channels": t.shape[1], "reduction": h // t.shape[2]}
        for name, t in zip("ABC", self.rl):
            meta[f"rl.stage{name}"] = {"channels": t.shape[1], "reduction": h // t.shape[2]}
        return meta


class BafnetModel(Module):
    """
    完整的双路径网络

    参数名前缀：dep.*、rl.*、xch1.*、xch2.*、fam.*（或 sum_fusion.*）、head.*。
    """

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        rng = np.random.default_rng(config.init_seed)
        ch = config.stage_channels
        if config.backbone == "van_b0":
            self.dep = DependencyPath(
                config.in_channels, ch, config.dep_depths, config.dep_mlp_ratios, rng,
                config.lka_kernel, config.lka_dilated_kernel, config.lka_dilation,
            )
        else:
            self.dep = ResNet18Stub(config.in_channels, ch, rng)

        if config.has_rl:
            c = config.rl_channels
            self.rl = RemoteLocalPath(
                ch[1], c, config.rl_depths, rng,
                window=config.window_size, num_heads=config.num_heads, mlp_ratio=config.rl_mlp_ratio,
                expansion=config.mslam_expansion, kernels=config.mslam_kernels,
                conv_kernel=config.eram_conv_kernel,
                use_local=config.use_rl_local, use_remote=config.use_rl_remote,
            )
            self.xch1 = Exchange(ch[2], c, 2, rng)
            self.xch2 = Exchange(ch[3], c, 4, rng)
            if config.fusion == "fam":
                self.fam = Fam(ch[3], c, rng, config.fam_gate_kernel)
                head_in = 2 * c
            else:
                self.sum_fusion = SumFusion(ch[3], c, rng)
                head_in = c
            self.head = SegHead(head_in, config.num_classes, 8, rng)
        else:
            self.head = SegHead(ch[3], config.num_classes, 32, rng)
        self.assign_scopes()

    def forward_features(self, image: Tensor, contexts: Optional[List[Dict[str, np.ndarray]]] = None) -> FeatureBundle:
        cfg = self.config
        check_divisible(image, cfg.input_multiple)
        if image.shape[1] != cfg.in_channels:
            raise ShapeError(f"输入通道 {image.shape[1]} 与配置 {cfg.in_channels} 不符")
        size = (image.shape[2], image.shape[3])
        s1 = self.dep.stage(1, image)
        s2 = self.dep.stage(2, s1)
        s3 = self.dep.stage(3, s2)
        if not cfg.has_rl:
            s4 = self.dep.stage(4, s3)
            return FeatureBundle(size, [s1, s2, s3, s4], low=s4)
        ra = self.rl.stage("A", self.rl.enter(s2), contexts)
        s3f, raf = self.xch1(s3, ra)
        s4 = self.dep.stage(4, s3f)
        rb = self.rl.stage("B", raf, contexts)
        s4f, rbf = self.xch2(s4, rb)
        rc = self.rl.stage("C", rbf, contexts)
        return FeatureBundle(size, [s1, s2, s3, s4], [ra, rb, rc], low=s4f, high=rc, contexts=contexts)

    def fuse(self, bundle: FeatureBundle) -> Tensor:
        if not self.config.has_rl:
            return bundle.low
        if self.config.fusion == "fam":
            return self.fam(bundle.low, bundle.high)
        return self.sum_fusion(bundle.low, bundle.high)

    def forward(self, image: Tensor) -> Tensor:
        return self.head(self.fuse(self.forward_features(image)))


def build_model(config: Optional[ModelConfig] = None) -> BafnetModel:
    config = config or ModelConfig()
    model = BafnetModel(config)
    logger.info(f"模型构建完成: 参数量 {model.param_registry().num_elements():,}，配置哈希 {config.config_hash()[:12]}")
    return model
