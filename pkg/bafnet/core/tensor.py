"""
张量与反向模式自动微分

Tensor 包装一个 numpy 数组；Function 子类实现前向与反向计算，
前向时把自身记录在输出张量上，backward 按拓扑逆序回放这条记录（tape）。
"""

import contextlib
import logging
import threading
from typing import Any, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

from bafnet.core.errors import NumericError, ShapeError

logger = logging.getLogger(__name__)

ArrayLike = Union[np.ndarray, float, int, Sequence[float]]

_state = threading.local()


def _grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


def get_default_dtype() -> np.dtype:
    return getattr(_state, "dtype", np.dtype(np.float32))


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """在上下文内不记录计算图"""
    previous = _grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = previous


@contextlib.contextmanager
def default_dtype(dtype: Any) -> Iterator[None]:
    """
    切换新建张量与参数的默认精度

    训练使用 float32，梯度检验使用 float64。
    """
    previous = get_default_dtype()
    _state.dtype = np.dtype(dtype)
    try:
        yield
    finally:
        _state.dtype = previous


class Function:
    """
    可微算子基类

    子类实现 forward(*arrays, **kwargs) -> ndarray 与
    backward(grad) -> 每个输入对应的梯度（不需要时为 None）。
    需要在反向中使用的中间量保存在实例属性上。
    """

    def __init__(self, *inputs: "Tensor"):
        self.inputs = inputs

    def forward(self, *args: np.ndarray, **kwargs: Any) -> np.ndarray:
        raise NotImplementedError(f"{type(self).__name__} 未实现前向计算")

    def backward(self, grad: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        raise NotImplementedError(f"{type(self).__name__} 未实现反向计算")

    @classmethod
    def apply(cls, *inputs: "Tensor", **kwargs: Any) -> "Tensor":
        func = cls(*inputs)
        out = func.forward(*(t.data for t in inputs), **kwargs)
        if not np.all(np.isfinite(out)):
            raise NumericError(f"{cls.__name__} 前向输出包含 NaN/Inf", {"shape": out.shape})
        requires_grad = _grad_enabled() and any(t.requires_grad for t in inputs)
        return Tensor(out, requires_grad=requires_grad, _ctx=func if requires_grad else None)

    @staticmethod
    def unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
        """把广播后的梯度求和回原始形状"""
        if grad.shape == shape:
            return grad
        while grad.ndim > len(shape):
            grad = grad.sum(axis=0)
        for axis, size in enumerate(shape):
            if size == 1 and grad.shape[axis] != 1:
                grad = grad.sum(axis=axis, keepdims=True)
        return grad


class Tensor:
    """稠密 N 维实数张量，特征图按 (batch, channel, height, width) 排列"""

    __array_priority__ = 100

    def __init__(
        self,
        data: ArrayLike,
        requires_grad: bool = False,
        dtype: Any = None,
        _ctx: Optional[Function] = None,
    ):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            dtype = data.dtype if isinstance(data, np.ndarray) and data.dtype.kind == "f" else get_default_dtype()
        self.data = np.asarray(data, dtype=dtype)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self._ctx = _ctx

    # ------------------------------------------------------------------ 属性
    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self._ctx is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.size != 1:
            raise ShapeError(f"item() 只适用于单元素张量，实际形状 {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def __len__(self) -> int:
        return self.shape[0]

    # -------------------------------------------------------------- 反向传播
    def backward(self, grad: Optional[np.ndarray] = None) -> None:
        """
        从标量损失出发反向传播

        所有 requires_grad 的叶子张量得到累加的梯度；不清零时多次调用会继续累加。

        Raises:
            ShapeError: 损失不是标量
            NumericError: 反向得到的梯度含 NaN/Inf
        """
        if grad is None:
            if self.size != 1:
                raise ShapeError(f"backward 需要标量损失，实际形状 {self.shape}")
            grad = np.ones_like(self.data)
        order = self._topological_order()
        grads = {id(self): np.asarray(grad, dtype=self.dtype)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._ctx is None:
                if node.requires_grad:
                    if not np.all(np.isfinite(g)):
                        raise NumericError("反向传播得到非有限梯度", {"shape": node.shape})
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            input_grads = node._ctx.backward(g)
            for inp, ig in zip(node._ctx.inputs, input_grads):
                if ig is None or not inp.requires_grad:
                    continue
                if ig.shape != inp.shape:
                    ig = Function.unbroadcast(ig, inp.shape)
                key = id(inp)
                grads[key] = grads[key] + ig if key in grads else ig

    def _topological_order(self) -> List["Tensor"]:
        order: List[Tensor] = []
        visited = set()
        stack: List[Tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            if node._ctx is not None:
                for inp in node._ctx.inputs:
                    if inp.requires_grad and id(inp) not in visited:
                        stack.append((inp, False))
        return order

    # ---------------------------------------------------------------- 运算符
    def _wrap(self, other: Any) -> "Tensor":
        return other if isinstance(other, Tensor) else Tensor(other, dtype=self.dtype)

    def __add__(self, other: Any) -> "Tensor":
        from bafnet.core import functional as F

        return F.add(self, self._wrap(other))

    __radd__ = __add__

    def __sub__(self, other: Any) -> "Tensor":
        from bafnet.core import functional as F

        return F.sub(self, self._wrap(other))

    def __rsub__(self, other: Any) -> "Tensor":
        from bafnet.core import functional as F

        return F.sub(self._wrap(other), self)

    def __mul__(self, other: Any) -> "Tensor":
        from bafnet.core import functional as F

        return F.mul(self, self._wrap(other))

    __rmul__ = __mul__

    def __truediv__(self, other: Any) -> "Tensor":
        from bafnet.core import functional as F

        return F.div(self, self._wrap(other))

    def __rtruediv__(self, other: Any) -> "Tensor":
        from bafnet.core import functional as F

        return F.div(self._wrap(other), self)

    def __neg__(self) -> "Tensor":
        from bafnet.core import functional as F

        return F.neg(self)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        from bafnet.core import functional as F

        return F.matmul(self, other)

    def __pow__(self, exponent: float) -> "Tensor":
        from bafnet.core import functional as F

        return F.power(self, exponent)

    def __getitem__(self, index: Any) -> "Tensor":
        from bafnet.core import functional as F

        return F.getitem(self, index)

    def sum(self, axis: Any = None, keepdims: bool = False) -> "Tensor":
        from bafnet.core import functional as F

        return F.sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis: Any = None, keepdims: bool = False) -> "Tensor":
        from bafnet.core import functional as F

        return F.mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape: Any) -> "Tensor":
        from bafnet.core import functional as F

        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return F.reshape(self, shape)

    def transpose(self, *axes: int) -> "Tensor":
        from bafnet.core import functional as F

        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return F.transpose(self, axes)

    def exp(self) -> "Tensor":
        from bafnet.core import functional as F

        return F.exp(self)

    def log(self) -> "Tensor":
        from bafnet.core import functional as F

        return F.log(self)


def tensor(data: ArrayLike, requires_grad: bool = False, dtype: Any = None) -> Tensor:
    return Tensor(np.array(data, dtype=dtype or get_default_dtype()), requires_grad=requires_grad)
