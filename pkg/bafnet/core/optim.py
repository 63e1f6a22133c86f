"""AdamW 优化器与余弦学习率"""

import logging
import math
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from bafnet.core.errors import ConfigError, ShapeError
from bafnet.core.module import Parameter

logger = logging.getLogger(__name__)


def cosine_lr(t: int, total: int, lr0: float) -> float:
    """
    lr(t) = 0.5·lr0·(1 + cos(πt/T))，下限为 0

    Raises:
        ConfigError: T 为 0 或 t 不在 [0, T] 内
    """
    if total <= 0:
        raise ConfigError(f"余弦调度的总步数必须为正，实际 {total}")
    if not 0 <= t <= total:
        raise ConfigError(f"步数 {t} 超出 [0, {total}]")
    return max(0.0, 0.5 * lr0 * (1.0 + math.cos(math.pi * t / total)))


def adamw_step(
    param: np.ndarray,
    grad: np.ndarray,
    m: np.ndarray,
    v: np.ndarray,
    step: int,
    lr: float,
    betas: Tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
    weight_decay: float = 0.0,
) -> None:
    """
    单个参数的一步 AdamW（原地更新 param、m、v）

    权重衰减直接作用于参数：param ← param·(1 - lr·wd)，之后再做带偏差修正的 Adam 更新。
    step 从 1 开始计数。
    """
    if not (param.shape == grad.shape == m.shape == v.shape):
        raise ShapeError(f"参数/梯度/动量形状不一致: {param.shape}, {grad.shape}, {m.shape}, {v.shape}")
    b1, b2 = betas
    if weight_decay:
        param *= 1.0 - lr * weight_decay
    m *= b1
    m += (1.0 - b1) * grad
    v *= b2
    v += (1.0 - b2) * grad * grad
    m_hat = m / (1.0 - b1 ** step)
    v_hat = v / (1.0 - b2 ** step)
    param -= lr * m_hat / (np.sqrt(v_hat) + eps)


class AdamW:
    """对一组 Parameter 做 AdamW；no_decay 的参数（归一化与偏置）不做权重衰减"""

    def __init__(
        self,
        params: Sequence[Parameter],
        lr: float = 2e-4,
        betas: Tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
        weight_decay: float = 1e-4,
    ):
        self.params: List[Parameter] = list(params)
        self.lr, self.betas, self.eps, self.weight_decay = lr, betas, eps, weight_decay
        self.step_count = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def grad_norm(self) -> float:
        total = 0.0
        for p in self.params:
            if p.grad is not None:
                total += float(np.sum(np.square(p.grad, dtype=np.float64)))
        return math.sqrt(total)

    def step(self, lr: Optional[float] = None) -> None:
        lr = self.lr if lr is None else lr
        self.step_count += 1
        for p, m, v in zip(self.params, self.m, self.v):
            grad = p.grad if p.grad is not None else np.zeros_like(p.data)
            wd = 0.0 if p.no_decay else self.weight_decay
            adamw_step(p.data, grad, m, v, self.step_count, lr, self.betas, self.eps, wd)

    def state_arrays(self) -> Dict[str, np.ndarray]:
        state = {}
        for i, (m, v) in enumerate(zip(self.m, self.v)):
            state[f"m.{i}"] = m
            state[f"v.{i}"] = v
        return state

    def load_state_arrays(self, state: Dict[str, np.ndarray], step_count: int) -> None:
        for i, p in enumerate(self.params):
            m, v = state[f"m.{i}"], state[f"v.{i}"]
            if m.shape != p.shape or v.shape != p.shape:
                raise ShapeError(f"第 {i} 个参数的动量形状 {m.shape} 与参数 {p.shape} 不符")
            self.m[i] = np.array(m, dtype=p.dtype)
            self.v[i] = np.array(v, dtype=p.dtype)
        self.step_count = step_count
