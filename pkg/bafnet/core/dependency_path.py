"""
依赖路径：VAN-B0 风格的四阶段编码器

核心是分解的大核注意力（LKA）：5×5 深度卷积 → 7×7 空洞（d=3）深度卷积 → 1×1 卷积，
得到的注意力图与输入逐元素相乘。四个阶段输出分辨率依次为输入的 1/4、1/8、1/16、1/32。
"""

import logging
from typing import List, Sequence

import numpy as np

from bafnet.core import functional as F
from bafnet.core.errors import ShapeError
from bafnet.core.module import BatchNorm2d, Conv2d, LayerNorm, Module
from bafnet.core.tensor import Tensor

logger = logging.getLogger(__name__)


class LargeKernelAttention(Module):
    """Output = Conv1×1(DW-D-Conv(DW-Conv(F))) ⊙ F"""

    def __init__(self, channels: int, rng: np.random.Generator, kernel: int = 5, dilated_kernel: int = 7, dilation: int = 3):
        super().__init__()
        self.channels = channels
        self.dw = Conv2d(channels, channels, kernel, rng, groups=channels)
        self.dwd = Conv2d(channels, channels, dilated_kernel, rng, dilation=dilation, groups=channels)
        self.pw = Conv2d(channels, channels, 1, rng)

    def attention_map(self, x: Tensor) -> Tensor:
        if x.ndim != 4 or x.shape[1] != self.channels:
            raise ShapeError(f"LKA 期望 {self.channels} 通道的 4 维输入，实际 {x.shape}")
        return self.pw(self.dwd(self.dw(x)))

    def receptive_radius(self) -> int:
        """组合感受野的半径（像素），由两个深度卷积的核尺寸与空洞率决定"""
        return (self.dw.kernel_size - 1) // 2 * self.dw.dilation + (self.dwd.kernel_size - 1) // 2 * self.dwd.dilation

    def forward(self, x: Tensor) -> Tensor:
        return self.attention_map(x) * x


class SpatialAttention(Module):
    """norm → 1×1 → GELU → LKA → 1×1"""

    def __init__(self, channels: int, rng: np.random.Generator, kernel: int, dilated_kernel: int, dilation: int):
        super().__init__()
        self.proj1 = Conv2d(channels, channels, 1, rng)
        self.lka = LargeKernelAttention(channels, rng, kernel, dilated_kernel, dilation)
        self.proj2 = Conv2d(channels, channels, 1, rng)

    def forward(self, x: Tensor) -> Tensor:
        return self.proj2(self.lka(F.gelu(self.proj1(x))))


class ConvMlp(Module):
    """1×1 扩张 → 3×3 深度卷积 → GELU → 1×1 还原"""

    def __init__(self, channels: int, ratio: int, rng: np.random.Generator):
        super().__init__()
        hidden = channels * ratio
        self.fc1 = Conv2d(channels, hidden, 1, rng)
        self.dw = Conv2d(hidden, hidden, 3, rng, groups=hidden)
        self.fc2 = Conv2d(hidden, channels, 1, rng)

    def forward(self, x: Tensor) -> Tensor:
        return self.fc2(F.gelu(self.dw(self.fc1(x))))


class VanBlock(Module):
    """两个残差子层：x + attn(BN(x))，再 x + mlp(BN(x))"""

    def __init__(self, channels: int, mlp_ratio: int, rng: np.random.Generator, kernel: int = 5, dilated_kernel: int = 7, dilation: int = 3):
        super().__init__()
        self.channels = channels
        self.norm1 = BatchNorm2d(channels)
        self.attn = SpatialAttention(channels, rng, kernel, dilated_kernel, dilation)
        self.norm2 = BatchNorm2d(channels)
        self.mlp = ConvMlp(channels, mlp_ratio, rng)

    def output_layers(self) -> List[Conv2d]:
        """两个子层各自的输出投影；全部置零时 block 退化为恒等映射"""
        return [self.attn.proj2, self.mlp.fc2]

    def forward(self, x: Tensor) -> Tensor:
        if x.ndim != 4 or x.shape[1] != self.channels:
            raise ShapeError(f"VAN block 期望 {self.channels} 通道，实际 {x.shape}")
        x = x + self.attn(self.norm1(x))
        return x + self.mlp(self.norm2(x))


class StemEmbed(Module):
    """两个 stride-2 的 3×3 卷积，把输入降到 1/4 分辨率"""

    def __init__(self, in_channels: int, out_channels: int, rng: np.random.Generator):
        super().__init__()
        mid = out_channels // 2
        self.conv1 = Conv2d(in_channels, mid, 3, rng, stride=2)
        self.bn1 = BatchNorm2d(mid)
        self.conv2 = Conv2d(mid, out_channels, 3, rng, stride=2)
        self.bn2 = BatchNorm2d(out_channels)

    def forward(self, x: Tensor) -> Tensor:
        return self.bn2(self.conv2(F.gelu(self.bn1(self.conv1(x)))))


class PatchEmbed(Module):
    """stride-2 的 3×3 卷积 + BN"""

    def __init__(self, in_channels: int, out_channels: int, rng: np.random.Generator):
        super().__init__()
        self.proj = Conv2d(in_channels, out_channels, 3, rng, stride=2)
        self.norm = BatchNorm2d(out_channels)

    def forward(self, x: Tensor) -> Tensor:
        return self.norm(self.proj(x))


class VanStage(Module):
    def __init__(self, embed: Module, channels: int, depth: int, mlp_ratio: int, rng: np.random.Generator, **lka_kwargs: int):
        super().__init__()
        self.embed = embed
        self.depth = depth
        for j in range(depth):
            setattr(self, f"block{j}", VanBlock(channels, mlp_ratio, rng, **lka_kwargs))
        self.norm = LayerNorm(channels, channels_first=True)

    def blocks(self) -> List[VanBlock]:
        return [getattr(self, f"block{j}") for j in range(self.depth)]

    def forward(self, x: Tensor) -> Tensor:
        x = self.embed(x)
        for block in self.blocks():
            x = block(x)
        return self.norm(x)


class DependencyPath(Module):
    """
    VAN-B0 编码器

    Args:
        in_channels: 输入图像通道数
        channels: 四个阶段的通道数
        depths: 四个阶段的 block 数
        mlp_ratios: 四个阶段 MLP 的扩张倍数
        rng: 参数初始化用的随机数发生器
    """

    reduction = 32

    def __init__(
        self,
        in_channels: int,
        channels: Sequence[int],
        depths: Sequence[int],
        mlp_ratios: Sequence[int],
        rng: np.random.Generator,
        kernel: int = 5,
        dilated_kernel: int = 7,
        dilation: int = 3,
    ):
        super().__init__()
        self.channels = tuple(channels)
        lka = dict(kernel=kernel, dilated_kernel=dilated_kernel, dilation=dilation)
        prev = in_channels
        for i, (c, d, r) in enumerate(zip(channels, depths, mlp_ratios), start=1):
            embed = StemEmbed(prev, c, rng) if i == 1 else PatchEmbed(prev, c, rng)
            setattr(self, f"stage{i}", VanStage(embed, c, d, r, rng, **lka))
            prev = c
        logger.debug(f"依赖路径构建完成: 通道 {self.channels}, 深度 {tuple(depths)}")

    def stage(self, index: int, x: Tensor) -> Tensor:
        """运行第 index 个阶段（从 1 开始）"""
        return getattr(self, f"stage{index}")(x)

    def forward(self, image: Tensor) -> List[Tensor]:
        return dependency_forward(self, image)


def check_divisible(image: Tensor, multiple: int) -> None:
    if image.ndim != 4:
        raise ShapeError(f"输入图像必须是 (B,C,H,W)，实际 {image.shape}")
    h, w = image.shape[-2:]
    if h % multiple or w % multiple:
        raise ShapeError(f"输入尺寸 {h}×{w} 必须能被 {multiple} 整除")


def dependency_forward(path: Module, image: Tensor) -> List[Tensor]:
    """
    依次运行四个阶段

    Returns:
        四个特征图，分辨率分别为输入的 1/4、1/8、1/16、1/32

    Raises:
        ShapeError: 输入尺寸不能被 32 整除
    """
    check_divisible(image, 32)
    feats = []
    x = image
    for i in range(1, 5):
        x = path.stage(i, x)
        feats.append(x)
    return feats
