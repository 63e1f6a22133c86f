"""
基于累计混淆矩阵的分割指标

行 = 参考类别，列 = 预测类别。OA 为 trace/总像素；mIoU 与 mean F1 在指定的评估类别上取平均
（默认只含五个前景类）。按公式字面实现的 OA 与宏平均 F1 作为诊断量单独提供。
"""

import logging
from typing import List, Optional, Sequence

import numpy as np

from bafnet.core.errors import DataError
from bafnet.schemas.schemas import CLASS_NAMES, ClassMetrics, MetricsReport

logger = logging.getLogger(__name__)


class ConfusionMatrix:
    def __init__(self, num_classes: int, class_names: Optional[Sequence[str]] = None, ignore_index: int = 255):
        self.num_classes = num_classes
        if class_names is None:
            class_names = CLASS_NAMES if num_classes == len(CLASS_NAMES) else [f"class_{i}" for i in range(num_classes)]
        if len(class_names) != num_classes:
            raise DataError(f"类别名数量 {len(class_names)} 与类别数 {num_classes} 不符")
        self.class_names = list(class_names)
        self.ignore_index = ignore_index
        self.counts = np.zeros((num_classes, num_classes), dtype=np.int64)

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def accumulate(self, pred: np.ndarray, ref: np.ndarray) -> "ConfusionMatrix":
        """
        累加一对预测/参考掩码，参考为 ignore_index 的像素跳过

        Raises:
            DataError: 形状不一致或类别越界
        """
        pred, ref = np.asarray(pred), np.asarray(ref)
        if pred.shape != ref.shape:
            raise DataError(f"预测 {pred.shape} 与参考 {ref.shape} 形状不一致")
        keep = ref != self.ignore_index
        p, r = pred[keep].astype(np.int64), ref[keep].astype(np.int64)
        c = self.num_classes
        for name, arr in (("预测", p), ("参考", r)):
            if arr.size and (arr.min() < 0 or arr.max() >= c):
                raise DataError(f"{name}掩码包含越界类别（范围 [0, {c})）: {int(arr.min())}..{int(arr.max())}")
        self.counts += np.bincount(r * c + p, minlength=c * c).reshape(c, c)
        return self

    def merge(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if other.num_classes != self.num_classes:
            raise DataError(f"无法合并类别数不同的混淆矩阵: {self.num_classes} vs {other.num_classes}")
        merged = ConfusionMatrix(self.num_classes, self.class_names, self.ignore_index)
        merged.counts = self.counts + other.counts
        return merged

    def copy(self) -> "ConfusionMatrix":
        return self.merge(ConfusionMatrix(self.num_classes, self.class_names, self.ignore_index))


def accumulate(cm: ConfusionMatrix, pred_mask: np.ndarray, ref_mask: np.ndarray) -> ConfusionMatrix:
    return cm.accumulate(pred_mask, ref_mask)


def _require_nonempty(cm: ConfusionMatrix) -> None:
    if cm.total == 0:
        raise DataError("混淆矩阵为空，无法计算指标")


def _ratio(num: np.ndarray, den: np.ndarray):
    safe = np.where(den > 0, den, 1)
    return np.where(den > 0, num / safe, 0.0), den == 0


def _classes(cm: ConfusionMatrix, classes: Optional[Sequence[int]]) -> List[int]:
    return list(range(cm.num_classes)) if classes is None else list(classes)


def per_class_iou(cm: ConfusionMatrix):
    tp = np.diag(cm.counts).astype(np.float64)
    fp = cm.counts.sum(axis=0) - tp
    fn = cm.counts.sum(axis=1) - tp
    return _ratio(tp, tp + fp + fn)


def precision_recall(cm: ConfusionMatrix):
    tp = np.diag(cm.counts).astype(np.float64)
    precision, p_flag = _ratio(tp, cm.counts.sum(axis=0).astype(np.float64))
    recall, r_flag = _ratio(tp, cm.counts.sum(axis=1).astype(np.float64))
    return precision, recall, p_flag | r_flag


def oa(cm: ConfusionMatrix) -> float:
    _require_nonempty(cm)
    return float(np.trace(cm.counts) / cm.total)


def miou(cm: ConfusionMatrix, classes: Optional[Sequence[int]] = None) -> float:
    _require_nonempty(cm)
    iou, _ = per_class_iou(cm)
    return float(np.mean(iou[_classes(cm, classes)]))


def per_class_f1(cm: ConfusionMatrix) -> List[float]:
    _require_nonempty(cm)
    precision, recall, _ = precision_recall(cm)
    f1, _ = _ratio(2 * precision * recall, precision + recall)
    return [float(v) for v in f1]


def mean_f1(cm: ConfusionMatrix, classes: Optional[Sequence[int]] = None) -> float:
    f1 = np.asarray(per_class_f1(cm))
    return float(np.mean(f1[_classes(cm, classes)]))


def oa_literal(cm: ConfusionMatrix) -> float:
    """ΣTP_k / Σ_k(TP_k+FP_k+TN_k+FN_k)，分母等于 C·总像素"""
    _require_nonempty(cm)
    return float(np.trace(cm.counts) / (cm.num_classes * cm.total))


def macro_f1(cm: ConfusionMatrix, classes: Optional[Sequence[int]] = None) -> float:
    """由宏平均 precision 与 recall 组合得到的 F1"""
    _require_nonempty(cm)
    precision, recall, _ = precision_recall(cm)
    idx = _classes(cm, classes)
    p, r = float(np.mean(precision[idx])), float(np.mean(recall[idx]))
    return 2 * p * r / (p + r) if p + r > 0 else 0.0


def build_report(cm: ConfusionMatrix, eval_classes: Optional[Sequence[int]] = None, tta: bool = False) -> MetricsReport:
    """汇总为 MetricsReport；分母为 0 的类别记 0 并标记 flagged"""
    _require_nonempty(cm)
    classes = _classes(cm, eval_classes)
    iou, iou_flag = per_class_iou(cm)
    precision, recall, pr_flag = precision_recall(cm)
    f1 = per_class_f1(cm)
    support = cm.counts.sum(axis=1)
    per_class = [
        ClassMetrics(
            index=k, name=cm.class_names[k], iou=float(iou[k]), f1=f1[k],
            precision=float(precision[k]), recall=float(recall[k]),
            support=int(support[k]), flagged=bool(iou_flag[k] or pr_flag[k]),
        )
        for k in classes
    ]
    flagged = [m.name for m in per_class if m.flagged]
    if flagged:
        logger.warning(f"以下类别的指标分母为 0，记为 0: {flagged}")
    return MetricsReport(
        oa=oa(cm), miou=miou(cm, classes), mean_f1=mean_f1(cm, classes),
        per_class=per_class, eval_classes=classes, total_pixels=cm.total, tta=tta,
        oa_literal=oa_literal(cm), macro_f1=macro_f1(cm, classes),
    )
