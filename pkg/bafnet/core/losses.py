"""
混合损失：交叉熵 + soft dice

默认的交叉熵按逐类二值形式实现，包含 (1-y)·log(1-ŷ) 项；loss_mode="categorical" 时改用标准多类交叉熵。
权重为 0 的像素（忽略标签、填充区域）不参与两项损失，N 为参与计算的像素数。
"""

import logging
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from bafnet.core import functional as F
from bafnet.core.errors import DataError, ShapeError
from bafnet.core.tensor import Tensor
from bafnet.schemas.schemas import LossReport

logger = logging.getLogger(__name__)

PROB_CLAMP = 1e-7
DICE_EPS = 1e-6


def one_hot(mask: np.ndarray, num_classes: int, ignore_index: int = 255, dtype=np.float32) -> Tuple[np.ndarray, np.ndarray]:
    """
    把 (B,H,W) 类别掩码转换为 (B,C,H,W) one-hot 与 (B,1,H,W) 像素权重

    Raises:
        DataError: 出现 [0, num_classes) 之外且不等于 ignore_index 的类别
    """
    mask = np.asarray(mask)
    valid = mask != ignore_index
    bad = valid & ((mask < 0) | (mask >= num_classes))
    if bad.any():
        loc = tuple(int(i) for i in np.argwhere(bad)[0])
        raise DataError(f"掩码在 {loc} 处的类别 {int(mask[loc])} 超出范围 [0, {num_classes})")
    safe = np.where(valid, mask, 0).astype(np.int64)
    onehot = (np.arange(num_classes)[None, :, None, None] == safe[:, None]).astype(dtype)
    weight = valid[:, None].astype(dtype)
    return onehot * weight, weight


def _check_inputs(probs: Tensor, onehot: np.ndarray, weight: Optional[np.ndarray]) -> np.ndarray:
    if probs.ndim != 4 or probs.shape != onehot.shape:
        raise ShapeError(f"概率 {probs.shape} 与 one-hot {onehot.shape} 形状不一致")
    if weight is None:
        weight = np.ones((onehot.shape[0], 1) + onehot.shape[2:], dtype=probs.dtype)
    if weight.shape != (onehot.shape[0], 1) + onehot.shape[2:]:
        raise ShapeError(f"像素权重形状 {weight.shape} 与输入不符")
    scored = weight[:, 0] > 0
    if not np.isin(onehot, (0.0, 1.0)).all():
        raise DataError("one-hot 标签只能包含 0 和 1")
    sums = onehot.sum(axis=1)
    if not np.all(sums[scored] == 1):
        raise DataError("每个参与计算的像素必须恰好属于一个类别")
    return weight.astype(probs.dtype)


def ce_loss(
    probs: Tensor,
    onehot: np.ndarray,
    weight: Optional[np.ndarray] = None,
    mode: str = "literal",
) -> Tensor:
    """
    交叉熵，对 N 个参与计算的像素取平均

    literal: -Σ_c [y·log ŷ + (1-y)·log(1-ŷ)]；categorical: -Σ_c y·log ŷ。
    ŷ 在取对数前钳位到 [1e-7, 1-1e-7]。
    """
    weight = _check_inputs(probs, onehot, weight)
    n = float(weight.sum())
    p = F.clip(probs, PROB_CLAMP, 1.0 - PROB_CLAMP)
    y = Tensor(onehot.astype(probs.dtype))
    term = y * F.log(p)
    if mode == "literal":
        term = term + (1.0 - y) * F.log(1.0 - p)
    elif mode != "categorical":
        raise ShapeError(f"未知的交叉熵模式: {mode}")
    if n == 0:
        return F.sum(term * 0.0)
    return -F.sum(term * weight) / n


def dice_loss(probs: Tensor, onehot: np.ndarray, weight: Optional[np.ndarray] = None) -> Tensor:
    """L_dice = 1 - (2/N)·Σ_n Σ_c ŷy / (ŷ + y + ε)"""
    weight = _check_inputs(probs, onehot, weight)
    n = float(weight.sum())
    y = Tensor(onehot.astype(probs.dtype))
    ratio = probs * y / (probs + y + DICE_EPS)
    if n == 0:
        return F.sum(ratio * 0.0)
    return 1.0 - F.sum(ratio * weight) * (2.0 / n)


@dataclass
class HybridLoss:
    ce: Tensor
    dice: Tensor
    total: Tensor

    def report(self) -> LossReport:
        ce, dice = self.ce.item(), self.dice.item()
        return LossReport(ce=ce, dice=dice, total=ce + dice)


def hybrid_loss(
    probs: Tensor,
    onehot: np.ndarray,
    weight: Optional[np.ndarray] = None,
    mode: str = "literal",
) -> HybridLoss:
    """L = L_CE + L_dice"""
    ce = ce_loss(probs, onehot, weight, mode)
    dice = dice_loss(probs, onehot, weight)
    return HybridLoss(ce=ce, dice=dice, total=ce + dice)


def segmentation_loss(
    logits: Tensor,
    mask: np.ndarray,
    num_classes: int,
    mode: str = "literal",
    ignore_index: int = 255,
    exclude_class: Optional[int] = None,
) -> HybridLoss:
    """
    由 logits 与类别掩码直接计算混合损失

    exclude_class 不为 None 时，该类的像素权重置 0（训练时不计杂类损失）。
    """
    if logits.ndim != 4 or logits.shape[1] != num_classes:
        raise ShapeError(f"logits 形状 {logits.shape} 与类别数 {num_classes} 不符")
    if mask.shape != (logits.shape[0],) + logits.shape[2:]:
        raise ShapeError(f"掩码形状 {mask.shape} 与 logits {logits.shape} 不对齐")
    mask = np.asarray(mask)
    if exclude_class is not None:
        mask = np.where(mask == exclude_class, ignore_index, mask)
    onehot, weight = one_hot(mask, num_classes, ignore_index, dtype=logits.dtype)
    probs = F.softmax(logits, axis=1)
    return hybrid_loss(probs, onehot, weight, mode)
