"""ResNet18 基线骨干（仅用于 cp_resnet18 消融配置）"""

from typing import List, Sequence

import numpy as np

from bafnet.core import functional as F
from bafnet.core.dependency_path import dependency_forward
from bafnet.core.module import BatchNorm2d, Conv2d, Module
from bafnet.core.tensor import Tensor


class BasicBlock(Module):
    def __init__(self, in_channels: int, out_channels: int, stride: int, rng: np.random.Generator):
        super().__init__()
        self.conv1 = Conv2d(in_channels, out_channels, 3, rng, stride=stride, bias=False)
        self.bn1 = BatchNorm2d(out_channels)
        self.conv2 = Conv2d(out_channels, out_channels, 3, rng, bias=False)
        self.bn2 = BatchNorm2d(out_channels)
        self.downsample = None
        if stride != 1 or in_channels != out_channels:
            self.downsample = Conv2d(in_channels, out_channels, 1, rng, stride=stride, padding=0, bias=False)
            self.downsample_bn = BatchNorm2d(out_channels)

    def forward(self, x: Tensor) -> Tensor:
        out = self.bn2(self.conv2(F.relu(self.bn1(self.conv1(x)))))
        shortcut = x if self.downsample is None else self.downsample_bn(self.downsample(x))
        return F.relu(out + shortcut)


class ResNetStage(Module):
    def __init__(self, in_channels: int, out_channels: int, stride: int, rng: np.random.Generator, stem: bool = False):
        super().__init__()
        self.stem = stem
        if stem:
            mid = out_channels // 2
            self.stem_conv1 = Conv2d(in_channels, mid, 3, rng, stride=2, bias=False)
            self.stem_bn1 = BatchNorm2d(mid)
            self.stem_conv2 = Conv2d(mid, out_channels, 3, rng, stride=2, bias=False)
            self.stem_bn2 = BatchNorm2d(out_channels)
            in_channels = out_channels
        self.block0 = BasicBlock(in_channels, out_channels, stride, rng)
        self.block1 = BasicBlock(out_channels, out_channels, 1, rng)

    def forward(self, x: Tensor) -> Tensor:
        if self.stem:
            x = F.relu(self.stem_bn1(self.stem_conv1(x)))
            x = F.relu(self.stem_bn2(self.stem_conv2(x)))
        return self.block1(self.block0(x))


class ResNet18Stub(Module):
    """两个 stride-2 的 3×3 卷积作为 stem，随后四个阶段各两个 basic block"""

    reduction = 32

    def __init__(self, in_channels: int, channels: Sequence[int], rng: np.random.Generator):
        super().__init__()
        self.channels = tuple(channels)
        self.stage1 = ResNetStage(in_channels, channels[0], 1, rng, stem=True)
        self.stage2 = ResNetStage(channels[0], channels[1], 2, rng)
        self.stage3 = ResNetStage(channels[1], channels[2], 2, rng)
        self.stage4 = ResNetStage(channels[2], channels[3], 2, rng)

    def stage(self, index: int, x: Tensor) -> Tensor:
        return getattr(self, f"stage{index}")(x)

    def forward(self, image: Tensor) -> List[Tensor]:
        return dependency_forward(self, image)
