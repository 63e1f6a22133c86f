"""
模块系统与基础层

Module 按属性赋值顺序登记子模块、参数和缓冲区，因此给定 ModelConfig 时
参数名与顺序是确定的。参数名采用层级点号形式，例如 dep.stage1.block0.attn.lka.dw.weight。
"""

import logging
import math
from collections import OrderedDict
from typing import Any, Iterator, List, Mapping, Optional, Tuple

import numpy as np

from bafnet.core import functional as F
from bafnet.core.errors import ShapeError
from bafnet.core.profiler import active_counter
from bafnet.core.tensor import Tensor, get_default_dtype

logger = logging.getLogger(__name__)


class Parameter(Tensor):
    """可训练张量；no_decay=True 的参数（归一化缩放/平移与偏置）不做权重衰减"""

    def __init__(self, data: np.ndarray, no_decay: bool = False):
        super().__init__(np.asarray(data, dtype=get_default_dtype()), requires_grad=True)
        self.no_decay = no_decay


class ParamRegistry(Mapping):
    """层级名称到参数的有序映射"""

    def __init__(self, entries: List[Tuple[str, Parameter]]):
        self._entries: "OrderedDict[str, Parameter]" = OrderedDict()
        seen = set()
        for name, param in entries:
            if name in self._entries:
                raise ShapeError(f"参数名重复: {name}")
            if id(param) in seen:
                raise ShapeError(f"同一参数被登记两次: {name}")
            seen.add(id(param))
            self._entries[name] = param

    def __getitem__(self, name: str) -> Parameter:
        return self._entries[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self._entries)

    def __len__(self) -> int:
        return len(self._entries)

    def num_elements(self) -> int:
        return int(sum(p.size for p in self._entries.values()))

    def with_prefix(self, prefix: str) -> "ParamRegistry":
        return ParamRegistry([(n, p) for n, p in self._entries.items() if n == prefix or n.startswith(prefix + ".")])


class Module:
    """所有网络层的基类"""

    def __init__(self) -> None:
        object.__setattr__(self, "_modules", OrderedDict())
        object.__setattr__(self, "_params", OrderedDict())
        object.__setattr__(self, "_buffers", OrderedDict())
        object.__setattr__(self, "training", True)
        object.__setattr__(self, "_scope", "")

    def __setattr__(self, name: str, value: Any) -> None:
        if isinstance(value, Parameter):
            self._params[name] = value
        elif isinstance(value, Module):
            self._modules[name] = value
        object.__setattr__(self, name, value)

    def register_buffer(self, name: str, value: np.ndarray) -> None:
        self._buffers[name] = value
        object.__setattr__(self, name, value)

    def add_module(self, name: str, module: "Module") -> None:
        setattr(self, name, module)

    # ------------------------------------------------------------ 遍历
    def named_modules(self, prefix: str = "") -> Iterator[Tuple[str, "Module"]]:
        yield prefix, self
        for name, child in self._modules.items():
            yield from child.named_modules(f"{prefix}.{name}" if prefix else name)

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Parameter]]:
        for mod_name, module in self.named_modules(prefix):
            for name, param in module._params.items():
                yield (f"{mod_name}.{name}" if mod_name else name), param

    def named_buffers(self, prefix: str = "") -> Iterator[Tuple[str, np.ndarray]]:
        for mod_name, module in self.named_modules(prefix):
            for name, buf in module._buffers.items():
                yield (f"{mod_name}.{name}" if mod_name else name), buf

    def parameters(self) -> List[Parameter]:
        return [p for _, p in self.named_parameters()]

    def param_registry(self) -> ParamRegistry:
        return ParamRegistry(list(self.named_parameters()))

    def assign_scopes(self) -> None:
        """记录每个子模块的层级名，供 FLOP 统计归类"""
        for name, module in self.named_modules():
            object.__setattr__(module, "_scope", name)

    # ------------------------------------------------------------ 状态
    def train(self, mode: bool = True) -> "Module":
        for _, module in self.named_modules():
            object.__setattr__(module, "training", mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def to_dtype(self, dtype: Any) -> "Module":
        """原地转换全部参数与缓冲区的精度"""
        for p in self.parameters():
            p.data = p.data.astype(dtype)
            p.grad = None
        for _, module in self.named_modules():
            for name, buf in list(module._buffers.items()):
                module.register_buffer(name, buf.astype(dtype))
        return self

    def state_arrays(self) -> "OrderedDict[str, np.ndarray]":
        state: "OrderedDict[str, np.ndarray]" = OrderedDict()
        for name, p in self.named_parameters():
            state[name] = p.data
        for name, buf in self.named_buffers():
            state[name] = buf
        return state

    def load_state_arrays(self, state: Mapping[str, np.ndarray]) -> None:
        expected = self.state_arrays()
        missing = [n for n in expected if n not in state]
        if missing:
            raise ShapeError(f"状态缺少条目: {missing[:5]}")
        for name, p in self.named_parameters():
            if state[name].shape != p.shape:
                raise ShapeError(f"{name} 形状 {state[name].shape} 与模型 {p.shape} 不符")
            p.data = np.array(state[name], dtype=p.dtype)
        for mod_name, module in self.named_modules():
            for name in list(module._buffers):
                full = f"{mod_name}.{name}" if mod_name else name
                module._buffers[name][...] = state[full]

    # ------------------------------------------------------------ 调用
    def forward(self, *args: Any, **kwargs: Any) -> Any:
        raise NotImplementedError

    def __call__(self, *args: Any, **kwargs: Any) -> Any:
        counter = active_counter()
        if counter is None:
            return self.forward(*args, **kwargs)
        with counter.push(self._scope):
            return self.forward(*args, **kwargs)


class ModuleList(Module):
    def __init__(self, modules: Optional[List[Module]] = None):
        super().__init__()
        for m in modules or []:
            self.append(m)

    def append(self, module: Module) -> None:
        setattr(self, str(len(self._modules)), module)

    def __iter__(self) -> Iterator[Module]:
        return iter(self._modules.values())

    def __len__(self) -> int:
        return len(self._modules)

    def __getitem__(self, index: int) -> Module:
        return list(self._modules.values())[index]


# ====================================================================== 层
def _uniform(rng: np.random.Generator, shape: Tuple[int, ...], fan_in: int) -> np.ndarray:
    bound = 1.0 / math.sqrt(max(fan_in, 1))
    return rng.uniform(-bound, bound, size=shape)


class Conv2d(Module):
    """二维卷积层；权重按 fan-in 缩放的均匀分布初始化，偏置初始化为 0"""

    def __init__(
        self,
        in_channels: int,
        out_channels: int,
        kernel_size: int,
        rng: np.random.Generator,
        stride: int = 1,
        padding: Optional[int] = None,
        dilation: int = 1,
        groups: int = 1,
        bias: bool = True,
    ):
        super().__init__()
        if in_channels % groups or out_channels % groups:
            raise ShapeError(f"groups={groups} 不能整除通道数 {in_channels}->{out_channels}")
        self.in_channels, self.out_channels = in_channels, out_channels
        self.kernel_size, self.stride, self.dilation, self.groups = kernel_size, stride, dilation, groups
        self.padding = dilation * (kernel_size - 1) // 2 if padding is None else padding
        fan_in = in_channels // groups * kernel_size * kernel_size
        self.weight = Parameter(_uniform(rng, (out_channels, in_channels // groups, kernel_size, kernel_size), fan_in))
        self.bias = Parameter(np.zeros(out_channels), no_decay=True) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return F.conv2d(x, self.weight, self.bias, self.stride, self.padding, self.dilation, self.groups)

    def set_delta_(self) -> None:
        """把深度卷积核设为中心冲激（恒等映射），偏置清零"""
        if self.groups != self.in_channels or self.in_channels != self.out_channels:
            raise ShapeError("只有深度卷积可以设为冲激核")
        w = np.zeros(self.weight.shape, dtype=self.weight.dtype)
        w[:, 0, self.kernel_size // 2, self.kernel_size // 2] = 1.0
        self.weight.data = w
        if self.bias is not None:
            self.bias.data = np.zeros_like(self.bias.data)


class Linear(Module):
    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator, bias: bool = True):
        super().__init__()
        self.in_features, self.out_features = in_features, out_features
        self.weight = Parameter(_uniform(rng, (out_features, in_features), in_features))
        self.bias = Parameter(np.zeros(out_features), no_decay=True) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return F.linear(x, self.weight, self.bias)


class BatchNorm2d(Module):
    def __init__(self, channels: int, momentum: float = F.BN_MOMENTUM, eps: float = F.BN_EPS):
        super().__init__()
        self.channels, self.momentum, self.eps = channels, momentum, eps
        self.weight = Parameter(np.ones(channels), no_decay=True)
        self.bias = Parameter(np.zeros(channels), no_decay=True)
        self.register_buffer("running_mean", np.zeros(channels, dtype=get_default_dtype()))
        self.register_buffer("running_var", np.ones(channels, dtype=get_default_dtype()))

    def forward(self, x: Tensor) -> Tensor:
        return F.batch_norm(
            x, self.weight, self.bias, self.running_mean, self.running_var,
            training=self.training, momentum=self.momentum, eps=self.eps,
        )


class LayerNorm(Module):
    """对最后一维归一化；channels_first=True 时用于 NCHW 特征图的通道维"""

    def __init__(self, channels: int, channels_first: bool = False, eps: float = F.LN_EPS):
        super().__init__()
        self.channels, self.channels_first, self.eps = channels, channels_first, eps
        self.weight = Parameter(np.ones(channels), no_decay=True)
        self.bias = Parameter(np.zeros(channels), no_decay=True)

    def forward(self, x: Tensor) -> Tensor:
        if self.channels_first:
            return F.channels_first(F.layer_norm(F.channels_last(x), self.weight, self.bias, self.eps))
        return F.layer_norm(x, self.weight, self.bias, self.eps)


def zero_module_(module: Module) -> Module:
    """把模块内所有参数置零"""
    for p in module.parameters():
        p.data = np.zeros_like(p.data)
    return module
