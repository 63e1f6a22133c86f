"""
可微算子集合

每个算子是一个 Function 子类，外加一个做前置条件检查的同名小写函数。
卷积、双线性缩放和各归一化均按 NCHW 布局实现；所有算子只依赖 numpy。
"""

import logging
import math
from typing import Any, List, Optional, Sequence, Tuple

import numpy as np

from bafnet.core.errors import ShapeError
from bafnet.core.profiler import active_counter, is_dry_run
from bafnet.core.tensor import Function, Tensor

logger = logging.getLogger(__name__)

BN_EPS = 1e-5
LN_EPS = 1e-5
BN_MOMENTUM = 0.1
_GELU_C = math.sqrt(2.0 / math.pi)


# ====================================================================== 逐元素
class Add(Function):
    def forward(self, a, b):
        return a + b

    def backward(self, grad):
        return grad, grad


class Sub(Function):
    def forward(self, a, b):
        return a - b

    def backward(self, grad):
        return grad, -grad


class Mul(Function):
    def forward(self, a, b):
        self.a, self.b = a, b
        return a * b

    def backward(self, grad):
        return grad * self.b, grad * self.a


class Div(Function):
    def forward(self, a, b):
        self.a, self.b = a, b
        return a / b

    def backward(self, grad):
        return grad / self.b, -grad * self.a / (self.b * self.b)


class Neg(Function):
    def forward(self, a):
        return -a

    def backward(self, grad):
        return (-grad,)


class Power(Function):
    def forward(self, a, exponent):
        self.a, self.exponent = a, exponent
        return a**exponent

    def backward(self, grad):
        return (grad * self.exponent * self.a ** (self.exponent - 1),)


class Exp(Function):
    def forward(self, a):
        self.out = np.exp(a)
        return self.out

    def backward(self, grad):
        return (grad * self.out,)


class Log(Function):
    def forward(self, a):
        self.a = a
        return np.log(a)

    def backward(self, grad):
        return (grad / self.a,)


class Clip(Function):
    def forward(self, a, low, high):
        self.mask = (a >= low) & (a <= high)
        return np.clip(a, low, high)

    def backward(self, grad):
        return (grad * self.mask,)


def add(a: Tensor, b: Tensor) -> Tensor:
    return Add.apply(a, b)


def sub(a: Tensor, b: Tensor) -> Tensor:
    return Sub.apply(a, b)


def mul(a: Tensor, b: Tensor) -> Tensor:
    return Mul.apply(a, b)


def div(a: Tensor, b: Tensor) -> Tensor:
    return Div.apply(a, b)


def neg(a: Tensor) -> Tensor:
    return Neg.apply(a)


def power(a: Tensor, exponent: float) -> Tensor:
    return Power.apply(a, exponent=exponent)


def exp(a: Tensor) -> Tensor:
    return Exp.apply(a)


def log(a: Tensor) -> Tensor:
    return Log.apply(a)


def clip(a: Tensor, low: float, high: float) -> Tensor:
    return Clip.apply(a, low=low, high=high)


# ================================================================== 归约与形状
def _normalize_axes(axis: Any, ndim: int) -> Optional[Tuple[int, ...]]:
    if axis is None:
        return None
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    return tuple(sorted(a % ndim for a in axes))


class Sum(Function):
    def forward(self, a, axis=None, keepdims=False):
        self.shape = a.shape
        self.axes = _normalize_axes(axis, a.ndim)
        self.keepdims = keepdims
        return np.sum(a, axis=self.axes, keepdims=keepdims)

    def backward(self, grad):
        if self.axes is not None and not self.keepdims:
            grad = np.expand_dims(grad, self.axes)
        return (np.broadcast_to(grad, self.shape),)


class Mean(Sum):
    def forward(self, a, axis=None, keepdims=False):
        out = super().forward(a, axis=axis, keepdims=keepdims)
        self.count = a.size // max(out.size, 1)
        return out / self.count

    def backward(self, grad):
        return (super().backward(grad)[0] / self.count,)


class Reshape(Function):
    def forward(self, a, shape):
        self.shape = a.shape
        return a.reshape(shape)

    def backward(self, grad):
        return (grad.reshape(self.shape),)


class Transpose(Function):
    def forward(self, a, axes):
        self.inverse = np.argsort(axes)
        return np.transpose(a, axes)

    def backward(self, grad):
        return (np.transpose(grad, self.inverse),)


class GetItem(Function):
    def forward(self, a, index):
        self.shape, self.dtype, self.index = a.shape, a.dtype, index
        return np.array(a[index])

    def backward(self, grad):
        full = np.zeros(self.shape, dtype=self.dtype)
        if _is_basic_index(self.index):
            full[self.index] = grad
        else:
            np.add.at(full, self.index, grad)
        return (full,)


def _is_basic_index(index: Any) -> bool:
    """整数与切片组成的基本索引不会重复选中同一元素"""
    parts = index if isinstance(index, tuple) else (index,)
    return all(isinstance(p, (int, np.integer, slice)) or p is Ellipsis or p is None for p in parts)


class Concat(Function):
    def forward(self, *arrays, axis=0):
        self.axis = axis
        self.splits = np.cumsum([a.shape[axis] for a in arrays])[:-1]
        return np.concatenate(arrays, axis=axis)

    def backward(self, grad):
        return tuple(np.split(grad, self.splits, axis=self.axis))


def sum(a: Tensor, axis: Any = None, keepdims: bool = False) -> Tensor:  # noqa: A001
    return Sum.apply(a, axis=axis, keepdims=keepdims)


def mean(a: Tensor, axis: Any = None, keepdims: bool = False) -> Tensor:
    return Mean.apply(a, axis=axis, keepdims=keepdims)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    return Reshape.apply(a, shape=tuple(shape))


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeError(f"transpose 轴排列 {tuple(axes)} 与维度 {a.ndim} 不符")
    return Transpose.apply(a, axes=tuple(axes))


def getitem(a: Tensor, index: Any) -> Tensor:
    return GetItem.apply(a, index=index)


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    """沿指定轴拼接；除拼接轴外其余维度必须一致"""
    if not tensors:
        raise ShapeError("concat 需要至少一个输入")
    ref = tensors[0].shape
    axis = axis % len(ref)
    for t in tensors[1:]:
        if len(t.shape) != len(ref) or any(s != r for i, (s, r) in enumerate(zip(t.shape, ref)) if i != axis):
            raise ShapeError(f"concat 形状不一致: {ref} 与 {t.shape}（轴 {axis}）")
    return Concat.apply(*tensors, axis=axis)


def global_avg_pool(x: Tensor) -> Tensor:
    """(B,C,H,W) -> (B,C,1,1)"""
    if x.ndim != 4:
        raise ShapeError(f"global_avg_pool 需要 4 维输入，实际 {x.shape}")
    return mean(x, axis=(2, 3), keepdims=True)


# =================================================================== 矩阵乘法
class MatMul(Function):
    def forward(self, a, b):
        self.a, self.b = a, b
        counter = active_counter()
        if counter is not None:
            batch = int(np.prod(np.broadcast_shapes(a.shape[:-2], b.shape[:-2]))) if a.ndim > 2 or b.ndim > 2 else 1
            counter.record(batch * a.shape[-2] * a.shape[-1] * b.shape[-1])
        return np.matmul(a, b)

    def backward(self, grad):
        ga = np.matmul(grad, np.swapaxes(self.b, -1, -2))
        gb = np.matmul(np.swapaxes(self.a, -1, -2), grad)
        return ga, gb


class LinearFn(Function):
    """y = x @ W^T + b，作用在最后一维"""

    def forward(self, x, weight, bias=None):
        self.x, self.weight = x, weight
        self.has_bias = bias is not None
        counter = active_counter()
        rows = x.size // x.shape[-1]
        if counter is not None:
            counter.record(rows * weight.shape[0] * weight.shape[1], rows * weight.shape[0] if self.has_bias else 0)
        if counter is not None and counter.dry_run:
            return np.zeros(x.shape[:-1] + (weight.shape[0],), dtype=x.dtype)
        out = np.matmul(x, weight.T)
        return out + bias if self.has_bias else out

    def backward(self, grad):
        gx = np.matmul(grad, self.weight)
        g2 = grad.reshape(-1, grad.shape[-1])
        gw = np.matmul(g2.T, self.x.reshape(-1, self.x.shape[-1]))
        if self.has_bias:
            return gx, gw, g2.sum(axis=0)
        return gx, gw


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul 形状不匹配: {a.shape} @ {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError as e:
        raise ShapeError(f"matmul 批维度无法广播: {a.shape} @ {b.shape}") from e
    return MatMul.apply(a, b)


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    if weight.ndim != 2 or x.shape[-1] != weight.shape[1]:
        raise ShapeError(f"linear 输入最后一维 {x.shape[-1]} 与权重 {weight.shape} 不符")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ShapeError(f"linear 偏置形状 {bias.shape} 应为 {(weight.shape[0],)}")
    inputs = (x, weight) if bias is None else (x, weight, bias)
    return LinearFn.apply(*inputs)


# ===================================================================== 激活
class Relu(Function):
    def forward(self, a):
        self.mask = a > 0
        return a * self.mask

    def backward(self, grad):
        return (grad * self.mask,)


class Gelu(Function):
    """tanh 近似的 GELU"""

    def forward(self, a):
        self.a = a
        self.t = np.tanh(_GELU_C * (a + 0.044715 * a**3))
        return 0.5 * a * (1.0 + self.t)

    def backward(self, grad):
        a, t = self.a, self.t
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * a**2)
        return (grad * (0.5 * (1.0 + t) + 0.5 * a * (1.0 - t * t) * dinner),)


class Sigmoid(Function):
    def forward(self, a):
        self.out = 0.5 * (1.0 + np.tanh(0.5 * a))
        return self.out

    def backward(self, grad):
        return (grad * self.out * (1.0 - self.out),)


class Softmax(Function):
    def forward(self, a, axis=-1):
        self.axis = axis
        shifted = np.exp(a - a.max(axis=axis, keepdims=True))
        self.out = shifted / shifted.sum(axis=axis, keepdims=True)
        return self.out

    def backward(self, grad):
        s = self.out
        return (s * (grad - (grad * s).sum(axis=self.axis, keepdims=True)),)


def relu(x: Tensor) -> Tensor:
    return Relu.apply(x)


def gelu(x: Tensor) -> Tensor:
    return Gelu.apply(x)


def sigmoid(x: Tensor) -> Tensor:
    return Sigmoid.apply(x)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    return Softmax.apply(x, axis=axis)


# ===================================================================== 卷积
def conv_output_size(size: int, kernel: int, stride: int, padding: int, dilation: int) -> int:
    return (size + 2 * padding - dilation * (kernel - 1) - 1) // stride + 1


def _tap(xp: np.ndarray, i: int, j: int, dilation: int, stride: int, ho: int, wo: int) -> Tuple[slice, slice]:
    r0, c0 = i * dilation, j * dilation
    return slice(r0, r0 + stride * (ho - 1) + 1, stride), slice(c0, c0 + stride * (wo - 1) + 1, stride)


class Conv2dFn(Function):
    """
    通用二维卷积：groups=1 为普通卷积，groups=通道数 为深度卷积，
    dilation>1 为空洞卷积；边界一律零填充。
    """

    def forward(self, x, weight, bias=None, stride=1, padding=0, dilation=1, groups=1):
        b, c, h, w = x.shape
        o, cg, k, _ = weight.shape
        ho = conv_output_size(h, k, stride, padding, dilation)
        wo = conv_output_size(w, k, stride, padding, dilation)
        self.x_shape, self.weight = x.shape, weight
        self.stride, self.padding, self.dilation, self.groups = stride, padding, dilation, groups
        self.has_bias = bias is not None
        self.out_hw = (ho, wo)

        counter = active_counter()
        if counter is not None:
            counter.record(b * o * ho * wo * cg * k * k, b * o * ho * wo if self.has_bias else 0)
            if counter.dry_run:
                return np.zeros((b, o, ho, wo), dtype=x.dtype)

        xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x
        self.xp = xp
        if groups == 1 and k == 1 and stride == 1:
            self.mode = "pointwise"
            out = np.matmul(weight.reshape(o, c), xp.reshape(b, c, -1)).reshape(b, o, ho, wo)
        elif groups == c and o == c and cg == 1:
            self.mode = "depthwise"
            out = np.zeros((b, o, ho, wo), dtype=x.dtype)
            for i in range(k):
                for j in range(k):
                    rs, cs = _tap(xp, i, j, dilation, stride, ho, wo)
                    out += weight[:, 0, i, j][None, :, None, None] * xp[:, :, rs, cs]
        else:
            self.mode = "im2col"
            og = o // groups
            self.cols: List[np.ndarray] = []
            outs = []
            for g in range(groups):
                cols = np.empty((b, cg, k, k, ho, wo), dtype=x.dtype)
                for i in range(k):
                    for j in range(k):
                        rs, cs = _tap(xp, i, j, dilation, stride, ho, wo)
                        cols[:, :, i, j] = xp[:, g * cg:(g + 1) * cg, rs, cs]
                cols = cols.reshape(b, cg * k * k, ho * wo)
                self.cols.append(cols)
                wg = weight[g * og:(g + 1) * og].reshape(og, cg * k * k)
                outs.append(np.matmul(wg, cols))
            out = np.concatenate(outs, axis=1).reshape(b, o, ho, wo)
        if self.has_bias:
            out = out + bias[None, :, None, None]
        return out

    def backward(self, grad):
        b, c, h, w = self.x_shape
        o, cg, k, _ = self.weight.shape
        ho, wo = self.out_hw
        p, s, d = self.padding, self.stride, self.dilation
        xp = self.xp
        gxp = np.zeros(xp.shape, dtype=grad.dtype)
        gw = np.zeros(self.weight.shape, dtype=grad.dtype)

        if self.mode == "pointwise":
            g2 = grad.reshape(b, o, -1)
            x2 = xp.reshape(b, c, -1)
            gw = np.matmul(g2, np.swapaxes(x2, 1, 2)).sum(axis=0).reshape(self.weight.shape)
            gxp = np.matmul(self.weight.reshape(o, c).T, g2).reshape(xp.shape)
        elif self.mode == "depthwise":
            for i in range(k):
                for j in range(k):
                    rs, cs = _tap(xp, i, j, d, s, ho, wo)
                    gw[:, 0, i, j] = np.sum(grad * xp[:, :, rs, cs], axis=(0, 2, 3))
                    gxp[:, :, rs, cs] += self.weight[:, 0, i, j][None, :, None, None] * grad
        else:
            og = o // self.groups
            for g in range(self.groups):
                gg = grad[:, g * og:(g + 1) * og].reshape(b, og, -1)
                cols = self.cols[g]
                gw[g * og:(g + 1) * og] = (
                    np.matmul(gg, np.swapaxes(cols, 1, 2)).sum(axis=0).reshape(og, cg, k, k)
                )
                wg = self.weight[g * og:(g + 1) * og].reshape(og, cg * k * k)
                gcols = np.matmul(wg.T, gg).reshape(b, cg, k, k, ho, wo)
                for i in range(k):
                    for j in range(k):
                        rs, cs = _tap(xp, i, j, d, s, ho, wo)
                        gxp[:, g * cg:(g + 1) * cg, rs, cs] += gcols[:, :, i, j]

        gx = gxp[:, :, p:p + h, p:p + w] if p else gxp
        if self.has_bias:
            return gx, gw, grad.sum(axis=(0, 2, 3))
        return gx, gw


def conv2d(
    x: Tensor,
    weight: Tensor,
    bias: Optional[Tensor] = None,
    stride: int = 1,
    padding: int = 0,
    dilation: int = 1,
    groups: int = 1,
) -> Tensor:
    """
    二维卷积

    Args:
        x: (B, Cin, H, W)
        weight: (Cout, Cin/groups, k, k)
        bias: (Cout,) 或 None

    Raises:
        ShapeError: 形状不匹配、groups 不整除通道数、stride/dilation 非正
    """
    if stride <= 0 or dilation <= 0 or padding < 0 or groups <= 0:
        raise ShapeError(f"conv2d 参数非法: stride={stride}, dilation={dilation}, padding={padding}, groups={groups}")
    if x.ndim != 4 or weight.ndim != 4 or weight.shape[2] != weight.shape[3]:
        raise ShapeError(f"conv2d 需要 4 维输入与方形卷积核，实际 {x.shape} / {weight.shape}")
    c, o = x.shape[1], weight.shape[0]
    if c % groups or o % groups:
        raise ShapeError(f"groups={groups} 不能整除通道数 Cin={c}, Cout={o}")
    if weight.shape[1] != c // groups:
        raise ShapeError(f"权重形状 {weight.shape} 与输入通道 {c}/groups={groups} 不符")
    if bias is not None and bias.shape != (o,):
        raise ShapeError(f"偏置形状 {bias.shape} 应为 {(o,)}")
    k = weight.shape[2]
    ho = conv_output_size(x.shape[2], k, stride, padding, dilation)
    wo = conv_output_size(x.shape[3], k, stride, padding, dilation)
    if ho <= 0 or wo <= 0:
        raise ShapeError(f"conv2d 输出尺寸非正: 输入 {x.shape}, k={k}, padding={padding}, dilation={dilation}")
    inputs = (x, weight) if bias is None else (x, weight, bias)
    return Conv2dFn.apply(*inputs, stride=stride, padding=padding, dilation=dilation, groups=groups)


# =============================================================== 双线性插值
def bilinear_matrix(in_size: int, out_size: int, dtype: Any = np.float64) -> np.ndarray:
    """
    半像素中心约定（不对齐角点）的一维插值矩阵 (out_size, in_size)，边界钳位

    每一行的权重之和为 1，因此常数输入保持不变。
    """
    scale = in_size / out_size
    src = (np.arange(out_size, dtype=np.float64) + 0.5) * scale - 0.5
    src = np.maximum(src, 0.0)
    i0 = np.minimum(np.floor(src).astype(np.int64), in_size - 1)
    i1 = np.minimum(i0 + 1, in_size - 1)
    lam = src - i0
    lam = np.where(i0 == in_size - 1, 0.0, lam)
    matrix = np.zeros((out_size, in_size), dtype=np.float64)
    rows = np.arange(out_size)
    np.add.at(matrix, (rows, i0), 1.0 - lam)
    np.add.at(matrix, (rows, i1), lam)
    return matrix.astype(dtype)


def resize_bilinear_array(arr: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """对最后两维做双线性缩放的纯 numpy 版本，供数据管线使用"""
    h, w = arr.shape[-2:]
    if (h, w) == (out_h, out_w):
        return arr.copy()
    ry = bilinear_matrix(h, out_h, arr.dtype if arr.dtype.kind == "f" else np.float64)
    rx = bilinear_matrix(w, out_w, ry.dtype)
    return np.matmul(np.matmul(ry, arr), rx.T)


class BilinearResize(Function):
    def forward(self, x, out_h, out_w):
        h, w = x.shape[-2:]
        self.identity = (h, w) == (out_h, out_w)
        if self.identity:
            return x.copy()
        self.ry = bilinear_matrix(h, out_h, x.dtype)
        self.rx = bilinear_matrix(w, out_w, x.dtype)
        if is_dry_run():
            return np.zeros(x.shape[:-2] + (out_h, out_w), dtype=x.dtype)
        return np.matmul(np.matmul(self.ry, x), self.rx.T)

    def backward(self, grad):
        if self.identity:
            return (grad,)
        return (np.matmul(self.ry.T, np.matmul(grad, self.rx)),)


def bilinear_resize(
    x: Tensor,
    factor: Optional[float] = None,
    size: Optional[Tuple[int, int]] = None,
) -> Tensor:
    """
    双线性缩放，按倍率或目标尺寸二选一

    输出尺寸 = round(输入尺寸 × factor)。

    Raises:
        ShapeError: 倍率非正或目标尺寸非法
    """
    if x.ndim != 4:
        raise ShapeError(f"bilinear_resize 需要 4 维输入，实际 {x.shape}")
    h, w = x.shape[-2:]
    if size is None:
        if factor is None or factor <= 0:
            raise ShapeError(f"缩放倍率必须为正，实际 {factor}")
        size = (int(math.floor(h * factor + 0.5)), int(math.floor(w * factor + 0.5)))
    out_h, out_w = int(size[0]), int(size[1])
    if out_h <= 0 or out_w <= 0:
        raise ShapeError(f"目标尺寸非法: {size}")
    return BilinearResize.apply(x, out_h=out_h, out_w=out_w)


# ===================================================================== 归一化
class BatchNormFn(Function):
    def forward(self, x, scale, shift, running_mean, running_var, training, momentum, eps):
        axes = (0, 2, 3)
        self.training, self.scale = training, scale
        if training:
            mu = x.mean(axis=axes)
            var = x.var(axis=axes)
            n = x.size // x.shape[1]
            running_mean *= 1.0 - momentum
            running_mean += momentum * mu
            running_var *= 1.0 - momentum
            running_var += momentum * var * (n / (n - 1) if n > 1 else 1.0)
        else:
            mu, var = running_mean, running_var
        self.inv_std = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
        self.xhat = (x - mu[None, :, None, None]) * self.inv_std[None, :, None, None]
        return self.xhat * scale[None, :, None, None] + shift[None, :, None, None]

    def backward(self, grad):
        axes = (0, 2, 3)
        gscale = np.sum(grad * self.xhat, axis=axes)
        gshift = np.sum(grad, axis=axes)
        dxhat = grad * self.scale[None, :, None, None]
        inv = self.inv_std[None, :, None, None]
        if not self.training:
            return dxhat * inv, gscale, gshift
        n = grad.size // grad.shape[1]
        gx = inv / n * (
            n * dxhat
            - dxhat.sum(axis=axes, keepdims=True)
            - self.xhat * np.sum(dxhat * self.xhat, axis=axes, keepdims=True)
        )
        return gx, gscale, gshift


def batch_norm(
    x: Tensor,
    scale: Tensor,
    shift: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = BN_MOMENTUM,
    eps: float = BN_EPS,
) -> Tensor:
    """
    批归一化

    训练模式用批统计量并以 momentum 更新滑动统计（就地修改 running_mean/running_var），
    评估模式直接使用滑动统计。
    """
    if x.ndim != 4:
        raise ShapeError(f"batch_norm 需要 4 维输入，实际 {x.shape}")
    c = x.shape[1]
    for name, arr in (("scale", scale.data), ("shift", shift.data), ("running_mean", running_mean), ("running_var", running_var)):
        if arr.shape != (c,):
            raise ShapeError(f"batch_norm 的 {name} 形状 {arr.shape} 与通道数 {c} 不符")
    return BatchNormFn.apply(
        x, scale, shift,
        running_mean=running_mean, running_var=running_var,
        training=training, momentum=momentum, eps=eps,
    )


class LayerNormFn(Function):
    def forward(self, x, scale, shift, eps):
        mu = x.mean(axis=-1, keepdims=True)
        var = x.var(axis=-1, keepdims=True)
        self.inv_std = 1.0 / np.sqrt(var + eps)
        self.xhat = (x - mu) * self.inv_std
        self.scale = scale
        return self.xhat * scale + shift

    def backward(self, grad):
        n = grad.shape[-1]
        lead = tuple(range(grad.ndim - 1))
        gscale = np.sum(grad * self.xhat, axis=lead)
        gshift = np.sum(grad, axis=lead)
        dxhat = grad * self.scale
        gx = self.inv_std / n * (
            n * dxhat
            - dxhat.sum(axis=-1, keepdims=True)
            - self.xhat * np.sum(dxhat * self.xhat, axis=-1, keepdims=True)
        )
        return gx, gscale, gshift


def layer_norm(x: Tensor, scale: Tensor, shift: Tensor, eps: float = LN_EPS) -> Tensor:
    """在最后一维（token 的通道维）上做层归一化"""
    c = x.shape[-1]
    if scale.shape != (c,) or shift.shape != (c,):
        raise ShapeError(f"layer_norm 参数形状 {scale.shape}/{shift.shape} 与通道数 {c} 不符")
    return LayerNormFn.apply(x, scale, shift, eps=eps)


def channels_last(x: Tensor) -> Tensor:
    return transpose(x, (0, 2, 3, 1))


def channels_first(x: Tensor) -> Tensor:
    return transpose(x, (0, 3, 1, 2))
