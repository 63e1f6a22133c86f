"""
有限差分梯度检验

对标量函数 fn(*inputs) 的每个（或随机抽样的）输入元素做中心差分，
与 backward 得到的解析梯度比较。应在 float64 精度下运行。
"""

import logging
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from bafnet.core.tensor import Tensor

logger = logging.getLogger(__name__)


@dataclass
class GradcheckResult:
    max_rel_error: float
    checked: int
    passed: bool
    worst: Optional[Tuple[int, Tuple[int, ...]]] = None
    errors: List[float] = field(default_factory=list)
    labels: List[str] = field(default_factory=list)


def gradcheck(
    fn: Callable[..., Tensor],
    inputs: Sequence[Tensor],
    eps: float = 1e-4,
    rtol: float = 1e-3,
    atol: float = 1e-6,
    sample: Optional[int] = None,
    rng: Optional[np.random.Generator] = None,
    per_input: Optional[int] = None,
    labels: Optional[Sequence[str]] = None,
) -> GradcheckResult:
    """
    比较解析梯度与中心差分

    相对误差定义为 |a - n| / max(|a|, |n|, atol)；全部元素不超过 rtol 即通过。

    Args:
        fn: 返回标量 Tensor 的函数
        inputs: 需要检验的张量（requires_grad=True）
        eps: 差分步长
        sample: 若给定，则从所有输入元素中随机抽取这么多个进行检验
        per_input: 若给定，则改为从每个输入中各抽取这么多个元素
        labels: 各输入的名称，原样记录在结果中
    """
    for t in inputs:
        t.grad = None
    loss = fn(*inputs)
    loss.backward()
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in inputs]

    offsets = np.cumsum([0] + [t.size for t in inputs])
    flat = np.arange(offsets[-1])
    rng = rng or np.random.default_rng(0)
    if per_input is not None:
        flat = np.concatenate([
            offsets[k] + np.sort(rng.choice(t.size, size=min(per_input, t.size), replace=False))
            for k, t in enumerate(inputs)
        ])
    elif sample is not None and sample < offsets[-1]:
        flat = np.sort(rng.choice(offsets[-1], size=sample, replace=False))
    positions = []
    for g in flat:
        k = int(np.searchsorted(offsets, g, side="right") - 1)
        positions.append((k, np.unravel_index(int(g - offsets[k]), inputs[k].shape)))

    errors: List[float] = []
    worst, worst_err = None, 0.0
    for k, idx in positions:
        data = inputs[k].data
        original = data[idx]
        data[idx] = original + eps
        plus = fn(*inputs).item()
        data[idx] = original - eps
        minus = fn(*inputs).item()
        data[idx] = original
        numeric = (plus - minus) / (2 * eps)
        a = float(analytic[k][idx])
        err = abs(a - numeric) / max(abs(a), abs(numeric), atol)
        errors.append(err)
        if err > worst_err:
            worst, worst_err = (k, idx), err

    passed = worst_err <= rtol
    if not passed:
        logger.warning(f"梯度检验未通过: 最大相对误差 {worst_err:.3e} 位于输入 {worst}")
    return GradcheckResult(
        max_rel_error=worst_err, checked=len(positions), passed=passed, worst=worst, errors=errors,
        labels=list(labels or []),
    )
