"""
远程-局部路径

在 1/8 分辨率、固定通道数（默认 64）上堆叠 RLAB。每个 RLAB 由两条分支组成：
MSLAM（多尺度局部注意力，局部分支）与 ERAM（无移位窗口自注意力 + 7×7 深度卷积，远程分支），
两分支都读取 block 输入，输出求和后再与输入残差相加。
"""

import logging
import math
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from bafnet.core import functional as F
from bafnet.core.errors import ShapeError
from bafnet.core.module import BatchNorm2d, Conv2d, LayerNorm, Linear, Module, Parameter
from bafnet.core.tensor import Tensor

logger = logging.getLogger(__name__)

CONTEXT_NAMES = ("local", "window", "remote", "remote_local")


# ================================================================= 窗口划分
def _check_window(h: int, w: int, window: int) -> None:
    if window <= 0 or h % window or w % window:
        raise ShapeError(f"窗口大小 {window} 不能整除特征图尺寸 {h}×{w}")


def partition_nhwc(x: Tensor, window: int) -> Tensor:
    """(B,H,W,C) -> (B·H/w·W/w, w², C)"""
    b, h, w, c = x.shape
    _check_window(h, w, window)
    x = x.reshape(b, h // window, window, w // window, window, c)
    x = x.transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(-1, window * window, c)


def reverse_nhwc(windows: Tensor, h: int, w: int) -> Tensor:
    """(B·H/w·W/w, w², C) -> (B,H,W,C)"""
    n, tokens, c = windows.shape
    window = math.isqrt(tokens)
    if window * window != tokens:
        raise ShapeError(f"窗口 token 数 {tokens} 不是完全平方数")
    _check_window(h, w, window)
    per_image = (h // window) * (w // window)
    if n % per_image:
        raise ShapeError(f"窗口数 {n} 与特征图 {h}×{w}（每图 {per_image} 个窗口）不符")
    x = windows.reshape(n // per_image, h // window, w // window, window, window, c)
    x = x.transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(n // per_image, h, w, c)


def window_partition(x: Tensor, window: int) -> Tensor:
    """
    把 (B,C,H,W) 特征图划分为互不重叠的窗口

    Returns:
        (B·H/w·W/w, w², C) 的 token 张量，窗口内按行优先排列

    Raises:
        ShapeError: 窗口大小不能整除 H 或 W
    """
    if x.ndim != 4:
        raise ShapeError(f"window_partition 需要 4 维输入，实际 {x.shape}")
    return partition_nhwc(F.channels_last(x), window)


def window_reverse(windows: Tensor, h: int, w: int) -> Tensor:
    """window_partition 的逆变换，返回 (B,C,H,W)"""
    if windows.ndim != 3:
        raise ShapeError(f"window_reverse 需要 3 维输入，实际 {windows.shape}")
    return F.channels_first(reverse_nhwc(windows, h, w))


def relative_position_index(window: int) -> np.ndarray:
    """窗口内任意两个 token 的相对位置在偏置表中的行号，形状 (w², w²)"""
    coords = np.stack(np.meshgrid(np.arange(window), np.arange(window), indexing="ij")).reshape(2, -1)
    rel = (coords[:, :, None] - coords[:, None, :]).transpose(1, 2, 0) + (window - 1)
    return rel[..., 0] * (2 * window - 1) + rel[..., 1]


# ============================================================ 窗口自注意力
class WindowAttention(Module):
    """
    窗口内多头自注意力（W-MHSA）

    缩放因子为 1/sqrt(head_dim)，每个头带一张相对位置偏置表，初始化为 0。
    """

    def __init__(self, channels: int, window: int, num_heads: int, rng: np.random.Generator):
        super().__init__()
        if channels % num_heads:
            raise ShapeError(f"注意力头数 {num_heads} 不能整除通道数 {channels}")
        self.channels, self.window, self.num_heads = channels, window, num_heads
        self.head_dim = channels // num_heads
        self.scale = self.head_dim ** -0.5
        self.qkv = Linear(channels, 3 * channels, rng)
        self.proj = Linear(channels, channels, rng)
        self.relative_bias = Parameter(np.zeros(((2 * window - 1) ** 2, num_heads)), no_decay=True)
        self.bias_index = relative_position_index(window)
        self.last_attention: Optional[np.ndarray] = None
        self.keep_attention = False

    def position_bias(self) -> Tensor:
        tokens = self.window * self.window
        bias = self.relative_bias[self.bias_index.reshape(-1)]
        bias = bias.reshape(tokens, tokens, self.num_heads).transpose(2, 0, 1)
        return bias.reshape(1, self.num_heads, tokens, tokens)

    def forward(self, tokens: Tensor) -> Tensor:
        n, length, c = tokens.shape
        if c != self.channels or length != self.window * self.window:
            raise ShapeError(f"W-MHSA 期望 (N,{self.window ** 2},{self.channels})，实际 {tokens.shape}")
        qkv = self.qkv(tokens).reshape(n, length, 3, self.num_heads, self.head_dim).transpose(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        attn = F.matmul(q * self.scale, k.transpose(0, 1, 3, 2)) + self.position_bias()
        attn = F.softmax(attn, axis=-1)
        if self.keep_attention:
            self.last_attention = attn.data
        out = F.matmul(attn, v).transpose(0, 2, 1, 3).reshape(n, length, c)
        return self.proj(out)


# ====================================================================== MSLAM
class Mslam(Module):
    """
    多尺度局部注意力

    X̂ = Conv1×1(c→2c)(X)；Attention = Conv1×1(2c→c)(Σ_k DW_k(X̂))；
    Value = Conv1×1(X)；Out = Conv1×1(Attention ⊙ Value)
    """

    def __init__(self, channels: int, rng: np.random.Generator, expansion: int = 2, kernels: Sequence[int] = (3, 5, 7)):
        super().__init__()
        if len(set(kernels)) != len(kernels):
            raise ShapeError(f"MSLAM 分支卷积核不能重复: {tuple(kernels)}")
        self.channels = channels
        self.kernels = tuple(kernels)
        hidden = channels * expansion
        self.expand = Conv2d(channels, hidden, 1, rng)
        for k in self.kernels:
            setattr(self, f"dw{k}", Conv2d(hidden, hidden, k, rng, groups=hidden))
        self.reduce = Conv2d(hidden, channels, 1, rng)
        self.value = Conv2d(channels, channels, 1, rng)
        self.out = Conv2d(channels, channels, 1, rng)

    def branches(self) -> List[Conv2d]:
        return [getattr(self, f"dw{k}") for k in self.kernels]

    def forward(self, x: Tensor) -> Tensor:
        if x.ndim != 4 or x.shape[1] != self.channels:
            raise ShapeError(f"MSLAM 期望 {self.channels} 通道，实际 {x.shape}")
        expanded = self.expand(x)
        summed = None
        for branch in self.branches():
            y = branch(expanded)
            summed = y if summed is None else summed + y
        attention = self.reduce(summed)
        return self.out(attention * self.value(x))


# ======================================================================= ERAM
class Eram(Module):
    """
    远程注意力模块

    ĥ = W-MHSA(LN(h)) + h；out = DWConv7×7(MLP(LN(ĥ)) + ĥ)。
    窗口不做移位，跨窗口的信息交换只来自最后的深度卷积；该卷积无偏置，初始化为冲激核。
    """

    def __init__(
        self,
        channels: int,
        window: int,
        num_heads: int,
        mlp_ratio: int,
        rng: np.random.Generator,
        conv_kernel: int = 7,
    ):
        super().__init__()
        self.channels, self.window = channels, window
        self.norm1 = LayerNorm(channels)
        self.attn = WindowAttention(channels, window, num_heads, rng)
        self.norm2 = LayerNorm(channels)
        self.fc1 = Linear(channels, channels * mlp_ratio, rng)
        self.fc2 = Linear(channels * mlp_ratio, channels, rng)
        self.conv = Conv2d(channels, channels, conv_kernel, rng, groups=channels, bias=False)
        self.conv.set_delta_()

    def forward_with_window(self, x: Tensor) -> Tuple[Tensor, Tensor]:
        """返回 (输出, 深度卷积之前的窗口状态)，两者均为 NCHW"""
        if x.ndim != 4 or x.shape[1] != self.channels:
            raise ShapeError(f"ERAM 期望 {self.channels} 通道，实际 {x.shape}")
        b, c, h, w = x.shape
        _check_window(h, w, self.window)
        t = F.channels_last(x)
        hhat = reverse_nhwc(self.attn(partition_nhwc(self.norm1(t), self.window)), h, w) + t
        state = self.fc2(F.gelu(self.fc1(self.norm2(hhat)))) + hhat
        state = F.channels_first(state)
        return self.conv(state), state

    def forward(self, x: Tensor) -> Tensor:
        return self.forward_with_window(x)[0]


# ======================================================================= RLAB
class Rlab(Module):
    """
    远程-局部注意力 block：x + MSLAM(BN(x)) + ERAM(x)

    use_local / use_remote 关闭对应分支（消融配置）；两者都关闭时 block 为恒等映射。
    """

    def __init__(
        self,
        channels: int,
        rng: np.random.Generator,
        window: int = 8,
        num_heads: int = 4,
        mlp_ratio: int = 4,
        expansion: int = 2,
        kernels: Sequence[int] = (3, 5, 7),
        conv_kernel: int = 7,
        use_local: bool = True,
        use_remote: bool = True,
    ):
        super().__init__()
        self.channels = channels
        self.use_local, self.use_remote = use_local, use_remote
        if use_local:
            self.local_norm = BatchNorm2d(channels)
            self.mslam = Mslam(channels, rng, expansion, kernels)
        if use_remote:
            self.eram = Eram(channels, window, num_heads, mlp_ratio, rng, conv_kernel)

    def forward(self, x: Tensor, contexts: Optional[List[Dict[str, np.ndarray]]] = None) -> Tensor:
        if x.ndim != 4 or x.shape[1] != self.channels:
            raise ShapeError(f"RLAB 期望 {self.channels} 通道，实际 {x.shape}")
        out = x
        local = remote = window_state = None
        if self.use_local:
            local = self.mslam(self.local_norm(x))
            out = out + local
        if self.use_remote:
            remote, window_state = self.eram.forward_with_window(x)
            out = out + remote
        if contexts is not None:
            zeros = np.zeros_like(x.data)
            local_arr = zeros if local is None else local.data
            remote_arr = zeros if remote is None else remote.data
            contexts.append({
                "local": local_arr,
                "window": zeros if window_state is None else window_state.data,
                "remote": remote_arr,
                "remote_local": local_arr + remote_arr,
            })
        return out


class RlStage(Module):
    def __init__(self, depth: int, make_block):
        super().__init__()
        self.depth = depth
        for j in range(depth):
            setattr(self, f"block{j}", make_block())

    def blocks(self) -> List[Rlab]:
        return [getattr(self, f"block{j}") for j in range(self.depth)]

    def forward(self, x: Tensor, contexts: Optional[List[Dict[str, np.ndarray]]] = None) -> Tensor:
        for block in self.blocks():
            x = block(x, contexts)
        return x


class RemoteLocalPath(Module):
    """
    三个阶段（默认 2/1/1 个 RLAB），全程保持 1/8 分辨率

    entry 把依赖路径第二阶段的输出投影到本路径的通道数，作为本路径的输入。
    """

    stage_names = ("A", "B", "C")

    def __init__(
        self,
        entry_channels: int,
        channels: int,
        depths: Sequence[int],
        rng: np.random.Generator,
        window: int = 8,
        num_heads: int = 4,
        mlp_ratio: int = 4,
        expansion: int = 2,
        kernels: Sequence[int] = (3, 5, 7),
        conv_kernel: int = 7,
        use_local: bool = True,
        use_remote: bool = True,
    ):
        super().__init__()
        if len(depths) != 3:
            raise ShapeError(f"远程-局部路径需要三个阶段的深度，实际 {tuple(depths)}")
        self.channels, self.window = channels, window
        self.entry = Conv2d(entry_channels, channels, 1, rng)
        self.entry_bn = BatchNorm2d(channels)

        def make_block() -> Rlab:
            return Rlab(
                channels, rng, window, num_heads, mlp_ratio, expansion, kernels, conv_kernel,
                use_local=use_local, use_remote=use_remote,
            )

        for name, depth in zip(self.stage_names, depths):
            setattr(self, f"stage{name}", RlStage(depth, make_block))

    def enter(self, feat: Tensor) -> Tensor:
        return self.entry_bn(self.entry(feat))

    def stage(self, name: str, x: Tensor, contexts: Optional[List[Dict[str, np.ndarray]]] = None) -> Tensor:
        if x.ndim != 4 or x.shape[1] != self.channels:
            raise ShapeError(f"远程-局部阶段 {name} 期望 {self.channels} 通道，实际 {x.shape}")
        _check_window(x.shape[2], x.shape[3], self.window)
        return getattr(self, f"stage{name}")(x, contexts)

    def blocks(self) -> List[Rlab]:
        return [b for name in self.stage_names for b in getattr(self, f"stage{name}").blocks()]

    def forward(self, entry: Tensor, injected: Optional[Sequence[Optional[Tensor]]] = None) -> List[Tensor]:
        return remote_local_forward(self, entry, injected)


def remote_local_forward(
    path: RemoteLocalPath,
    entry: Tensor,
    injected: Optional[Sequence[Optional[Tensor]]] = None,
    contexts: Optional[List[Dict[str, np.ndarray]]] = None,
) -> List[Tensor]:
    """
    依次运行 A、B、C 三个阶段

    injected[i] 在第 i 个阶段之后加到该阶段输出上（路径交换送来的特征），None 表示不注入。

    Raises:
        ShapeError: 注入特征与阶段输出形状不一致
    """
    injected = list(injected or [])
    if len(injected) > 2:
        raise ShapeError(f"最多注入两次特征，实际 {len(injected)}")
    injected += [None] * (2 - len(injected))
    outputs = []
    x = entry
    for i, name in enumerate(path.stage_names):
        x = path.stage(name, x, contexts)
        outputs.append(x)
        if i < 2 and injected[i] is not None:
            if injected[i].shape != x.shape:
                raise ShapeError(f"注入特征形状 {injected[i].shape} 与阶段 {name} 输出 {x.shape} 不一致")
            x = x + injected[i]
    return outputs
