"""
算子级计算量记录

卷积、线性层与矩阵乘在前向时向当前激活的 FlopCounter 报告乘加次数；
Module 调用时压入自身名称，从而得到按模块划分的统计。
"""

import contextlib
import threading
from collections import OrderedDict
from typing import Dict, Iterator, List, Optional

_local = threading.local()


class FlopCounter:
    """
    FLOP 统计器

    约定：卷积/线性/矩阵乘按 2·MAC 计，另加偏置加法次数；逐元素运算不计。
    dry_run=True 时重型算子只根据形状返回全零输出，用于快速统计大分辨率输入。
    """

    def __init__(self, dry_run: bool = False):
        self.dry_run = dry_run
        self.macs: Dict[str, int] = OrderedDict()
        self.bias_adds: Dict[str, int] = OrderedDict()
        self._scopes: List[str] = []

    @property
    def scope(self) -> str:
        return self._scopes[-1] if self._scopes else ""

    def record(self, macs: int, bias_adds: int = 0) -> None:
        key = self.scope
        self.macs[key] = self.macs.get(key, 0) + int(macs)
        self.bias_adds[key] = self.bias_adds.get(key, 0) + int(bias_adds)

    @contextlib.contextmanager
    def push(self, name: str) -> Iterator[None]:
        self._scopes.append(name)
        try:
            yield
        finally:
            self._scopes.pop()

    @property
    def total_macs(self) -> int:
        return sum(self.macs.values())

    @property
    def total_flops(self) -> int:
        return 2 * self.total_macs + sum(self.bias_adds.values())

    def flops_by_scope(self) -> Dict[str, int]:
        return {k: 2 * self.macs[k] + self.bias_adds.get(k, 0) for k in self.macs}

    def __enter__(self) -> "FlopCounter":
        if active_counter() is not None:
            raise RuntimeError("FlopCounter 不支持嵌套")
        _local.counter = self
        return self

    def __exit__(self, *exc: object) -> None:
        _local.counter = None


def active_counter() -> Optional[FlopCounter]:
    return getattr(_local, "counter", None)


def is_dry_run() -> bool:
    counter = active_counter()
    return counter is not None and counter.dry_run
