"""
数据管线

- 调色板编解码（ISPRS 图例）
- 切片与拼接：规则网格切片，末端不足一片时在下/右侧镜像填充并把填充区记为忽略；步长小于切片时重叠区域对概率取平均
- 训练增强：随机尺度（裁剪/填充回原尺寸）、水平/垂直翻转、90° 旋转；掩码用最近邻
- 测试时增强：多尺度 + 固定的水平与垂直翻转，softmax 概率取平均后再 argmax
- 合成数据：道路、建筑、低矮植被、树木、汽车与杂类背景，掩码由构造精确给出
"""

import logging
import math
from dataclasses import dataclass, replace
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from bafnet.core import functional as F
from bafnet.core.errors import DataError, ShapeError
from bafnet.core.module import Module
from bafnet.core.tensor import Tensor, no_grad
from bafnet.schemas.schemas import CLASS_NAMES, TrainConfig

logger = logging.getLogger(__name__)

IGNORE_INDEX = 255

ISPRS_PALETTE: Tuple[Tuple[int, int, int], ...] = (
    (255, 255, 255),  # impervious surface
    (0, 0, 255),      # building
    (0, 255, 255),    # low vegetation
    (0, 255, 0),      # tree
    (255, 255, 0),    # car
    (255, 0, 0),      # clutter
)


@dataclass
class TileSample:
    """image: (3,H,W) float32 ∈ [0,1]；mask: (H,W) uint8，255 为忽略"""

    image: np.ndarray
    mask: np.ndarray
    source: str = ""
    offset: Tuple[int, int] = (0, 0)
    valid: Optional[Tuple[int, int]] = None

    def __post_init__(self) -> None:
        if self.image.ndim != 3 or self.mask.shape != self.image.shape[1:]:
            raise ShapeError(f"图像 {self.image.shape} 与掩码 {self.mask.shape} 空间尺寸不对齐")
        if self.valid is None:
            self.valid = (self.mask.shape[0], self.mask.shape[1])


# ===================================================================== 调色板
class ClassPalette:
    """类别索引与 RGB 颜色之间的双射"""

    def __init__(self, colors: Sequence[Tuple[int, int, int]] = ISPRS_PALETTE, names: Sequence[str] = CLASS_NAMES):
        if len(set(map(tuple, colors))) != len(colors):
            raise DataError("调色板颜色必须互不相同")
        if len(names) != len(colors):
            raise DataError("调色板颜色数与类别名数不符")
        self.colors = np.asarray(colors, dtype=np.uint8)
        self.names = list(names)
        self._codes = {self._code(c): i for i, c in enumerate(self.colors)}

    @staticmethod
    def _code(rgb: np.ndarray) -> int:
        r, g, b = (int(v) for v in rgb)
        return (r << 16) | (g << 8) | b

    @property
    def num_classes(self) -> int:
        return len(self.colors)

    def encode(self, mask: np.ndarray) -> np.ndarray:
        """(H,W) 类别索引 -> (H,W,3) uint8"""
        mask = np.asarray(mask)
        if mask.size and (mask.min() < 0 or mask.max() >= self.num_classes):
            raise DataError(f"掩码类别超出调色板范围 [0, {self.num_classes})")
        return self.colors[mask.astype(np.int64)]

    def decode(self, rgb: np.ndarray) -> np.ndarray:
        """
        (H,W,3) 调色板图像 -> (H,W) uint8 类别索引

        Raises:
            DataError: 出现调色板之外的颜色，消息中给出第一个出错像素的位置
        """
        rgb = np.asarray(rgb)
        if rgb.ndim != 3 or rgb.shape[2] != 3:
            raise DataError(f"标签图像必须是 (H,W,3)，实际 {rgb.shape}")
        codes = (rgb[..., 0].astype(np.int64) << 16) | (rgb[..., 1].astype(np.int64) << 8) | rgb[..., 2].astype(np.int64)
        keys = np.array(sorted(self._codes), dtype=np.int64)
        pos = np.clip(np.searchsorted(keys, codes), 0, len(keys) - 1)
        known = keys[pos] == codes
        if not known.all():
            y, x = (int(v) for v in np.argwhere(~known)[0])
            count = int((~known).sum())
            raise DataError(f"像素 ({y}, {x}) 的颜色 {tuple(int(v) for v in rgb[y, x])} 不在调色板中（共 {count} 个未知像素）")
        lookup = np.array([self._codes[k] for k in keys], dtype=np.uint8)
        return lookup[pos]


DEFAULT_PALETTE = ClassPalette()


# ================================================================= 切片与拼接
def tile_starts(length: int, size: int, stride: int) -> List[int]:
    """规则网格的起点：0, stride, 2·stride, ...，直到覆盖 length"""
    count = math.ceil(max(length - size, 0) / stride) + 1
    return [i * stride for i in range(count)]


def tile(
    image: np.ndarray,
    mask: np.ndarray,
    size: int,
    stride: int,
    source: str = "",
    ignore_index: int = IGNORE_INDEX,
) -> List[TileSample]:
    """
    把整幅图像切成 size×size 的切片

    网格末端不足一片时在下/右侧做镜像填充，填充区域的掩码记为 ignore_index；
    stride == size 时切片互不重叠，每个原始像素恰好属于一个切片的有效区域。

    Raises:
        DataError: 图像为空
        ShapeError: size/stride 非法或图像与掩码不对齐
    """
    if image.ndim != 3 or image.shape[1] == 0 or image.shape[2] == 0:
        raise DataError(f"图像为空或维度错误: {image.shape}")
    if mask.shape != image.shape[1:]:
        raise ShapeError(f"图像 {image.shape} 与掩码 {mask.shape} 不对齐")
    if size <= 0 or stride <= 0 or stride > size:
        raise ShapeError(f"切片参数非法（要求 0 < stride <= size）: size={size}, stride={stride}")
    h, w = mask.shape
    ys, xs = tile_starts(h, size, stride), tile_starts(w, size, stride)
    ph, pw = ys[-1] + size - h, xs[-1] + size - w
    if ph or pw:
        image = np.pad(image, ((0, 0), (0, ph), (0, pw)), mode="symmetric")
        mask = np.pad(mask, ((0, ph), (0, pw)), constant_values=ignore_index)
    tiles = []
    for y in ys:
        for x in xs:
            tiles.append(TileSample(
                image=image[:, y:y + size, x:x + size].copy(),
                mask=mask[y:y + size, x:x + size].copy(),
                source=source, offset=(y, x),
                valid=(min(size, h - y), min(size, w - x)),
            ))
    return tiles


class Stitcher:
    """按偏移累加切片的类别概率，并记录每个像素被覆盖的次数"""

    def __init__(self, num_classes: int, height: int, width: int):
        self.probs = np.zeros((num_classes, height, width), dtype=np.float64)
        self.coverage = np.zeros((height, width), dtype=np.int64)

    def add(self, probs: np.ndarray, offset: Tuple[int, int], valid: Optional[Tuple[int, int]] = None) -> None:
        y, x = offset
        vh, vw = valid or probs.shape[1:]
        self.probs[:, y:y + vh, x:x + vw] += probs[:, :vh, :vw]
        self.coverage[y:y + vh, x:x + vw] += 1

    def result(self) -> np.ndarray:
        if (self.coverage == 0).any():
            raise DataError("拼接结果存在未被任何切片覆盖的像素")
        return self.probs / self.coverage[None]

    def mask(self) -> np.ndarray:
        return np.argmax(self.result(), axis=0).astype(np.uint8)


def tiled_predict(
    predict: Callable[[np.ndarray], np.ndarray],
    image: np.ndarray,
    num_classes: int,
    size: int,
    stride: int,
) -> np.ndarray:
    """
    对大图逐片预测并拼接

    Args:
        predict: (B,3,size,size) -> (B,C,size,size) 的概率函数
        image: (3,H,W)

    Returns:
        (C,H,W) 拼接后的概率
    """
    h, w = image.shape[1:]
    dummy = np.zeros((h, w), dtype=np.uint8)
    stitcher = Stitcher(num_classes, h, w)
    for t in tile(image, dummy, size, stride):
        stitcher.add(predict(t.image[None])[0], t.offset, t.valid)
    return stitcher.result()


# ==================================================================== 增强
def resize_nearest(mask: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    h, w = mask.shape[-2:]
    rows = np.minimum(((np.arange(out_h) + 0.5) * h / out_h).astype(np.int64), h - 1)
    cols = np.minimum(((np.arange(out_w) + 0.5) * w / out_w).astype(np.int64), w - 1)
    return mask[..., rows[:, None], cols[None, :]]


def _fit(image: np.ndarray, mask: np.ndarray, size: Tuple[int, int], rng: np.random.Generator, ignore_index: int):
    """随机裁剪或在下/右侧填充回目标尺寸"""
    th, tw = size
    h, w = mask.shape
    if h > th or w > tw:
        y = int(rng.integers(0, max(h - th, 0) + 1))
        x = int(rng.integers(0, max(w - tw, 0) + 1))
        image, mask = image[:, y:y + th, x:x + tw], mask[y:y + th, x:x + tw]
        h, w = mask.shape
    if h < th or w < tw:
        image = np.pad(image, ((0, 0), (0, th - h), (0, tw - w)))
        mask = np.pad(mask, ((0, th - h), (0, tw - w)), constant_values=ignore_index)
    return image, mask


def augment(sample: TileSample, rng: np.random.Generator, config: Optional[TrainConfig] = None, ignore_index: int = IGNORE_INDEX) -> TileSample:
    """
    训练增强；图像与掩码施加同一变换

    依次：随机尺度（从 aug_scales 中选取，再裁剪/填充回原尺寸）、水平翻转、垂直翻转、k·90° 旋转（k∈{1,2,3}）。
    """
    config = config or TrainConfig()
    image, mask = sample.image, sample.mask
    h, w = mask.shape
    if rng.random() < config.aug_scale_prob:
        s = float(rng.choice(config.aug_scales))
        nh, nw = max(1, int(math.floor(h * s + 0.5))), max(1, int(math.floor(w * s + 0.5)))
        if (nh, nw) != (h, w):
            image = F.resize_bilinear_array(image, nh, nw).astype(sample.image.dtype)
            mask = resize_nearest(mask, nh, nw)
            image, mask = _fit(image, mask, (h, w), rng, ignore_index)
    if rng.random() < config.aug_hflip_prob:
        image, mask = image[:, :, ::-1], mask[:, ::-1]
    if rng.random() < config.aug_vflip_prob:
        image, mask = image[:, ::-1, :], mask[::-1, :]
    if rng.random() < config.aug_rotate_prob and h == w:
        k = int(rng.integers(1, 4))
        image, mask = np.rot90(image, k, axes=(1, 2)), np.rot90(mask, k, axes=(0, 1))
    return replace(sample, image=np.ascontiguousarray(image), mask=np.ascontiguousarray(mask))


# ============================================================= 测试时增强
def predict_probs(model: Module, image: np.ndarray) -> np.ndarray:
    """普通推理：softmax(model(image))，(B,3,H,W) -> (B,C,H,W)"""
    with no_grad():
        logits = model(Tensor(image.astype(_model_dtype(model), copy=False)))
        return F.softmax(logits, axis=1).data


def _model_dtype(model: Module) -> np.dtype:
    params = model.parameters()
    return params[0].dtype if params else np.dtype(np.float32)


def _flip(x: np.ndarray, kind: Optional[str]) -> np.ndarray:
    if kind == "h":
        return x[..., ::-1]
    if kind == "v":
        return x[..., ::-1, :]
    return x


def tta_variants(scales: Sequence[float], flips: bool) -> List[Tuple[float, Optional[str]]]:
    kinds: List[Optional[str]] = [None, "h", "v"] if flips else [None]
    return [(s, k) for s in scales for k in kinds]


def tta_predict(
    model: Module,
    image: np.ndarray,
    scales: Sequence[float] = (1.0,),
    flips: bool = False,
    multiple: Optional[int] = None,
    keep_variants: bool = False,
):
    """
    多尺度 + 翻转测试时增强

    每个变体：缩放（边长取 multiple 的整数倍）→ 翻转 → 前向 → softmax → 逆翻转 → 双线性缩放回原尺寸；
    所有变体的概率取算术平均。只有 (1.0, 不翻转) 一个变体时与 predict_probs 逐位相同。

    Returns:
        (B,C,H,W) 平均概率；keep_variants=True 时返回 (平均概率, 各变体概率列表)
    """
    if multiple is None:
        config = getattr(model, "config", None)
        multiple = config.input_multiple if config is not None else 1
    was_training = model.training
    if was_training:
        logger.debug("TTA 需要评估模式，临时切换 model.eval()")
        model.eval()
    h, w = image.shape[-2:]
    total = None
    variants = []
    try:
        for s, kind in tta_variants(scales, flips):
            sh = max(multiple, int(round(h * s / multiple)) * multiple)
            sw = max(multiple, int(round(w * s / multiple)) * multiple)
            x = image if (sh, sw) == (h, w) else F.resize_bilinear_array(image, sh, sw).astype(image.dtype)
            probs = _flip(predict_probs(model, np.ascontiguousarray(_flip(x, kind))), kind)
            if probs.shape[-2:] != (h, w):
                probs = F.resize_bilinear_array(probs, h, w)
            probs = np.ascontiguousarray(probs)
            if keep_variants:
                variants.append(probs)
            total = probs.copy() if total is None else total + probs
    finally:
        model.train(was_training)
    n = len(tta_variants(scales, flips))
    averaged = total if n == 1 else total / n
    return (averaged, variants) if keep_variants else averaged


# ==================================================================== 合成数据
_CLASS_COLORS = np.array([
    [0.58, 0.58, 0.60],  # impervious surface
    [0.78, 0.42, 0.30],  # building
    [0.55, 0.72, 0.35],  # low vegetation
    [0.12, 0.38, 0.14],  # tree
    [0.15, 0.25, 0.85],  # car
    [0.45, 0.36, 0.26],  # clutter
])
_TEXTURE_AMPLITUDE = np.array([0.02, 0.05, 0.06, 0.10, 0.02, 0.08])
_TEXTURE_FREQUENCY = np.array([0.0, 0.9, 0.35, 0.7, 0.0, 0.5])


def _rotated_rect(yy, xx, cy, cx, half_h, half_w, angle):
    c, s = math.cos(angle), math.sin(angle)
    u = (xx - cx) * c + (yy - cy) * s
    v = -(xx - cx) * s + (yy - cy) * c
    return (np.abs(u) <= half_w) & (np.abs(v) <= half_h)


def _ribbon(yy, xx, cy, cx, width, angle):
    return np.abs(-(xx - cx) * math.sin(angle) + (yy - cy) * math.cos(angle)) <= width / 2


def _blob(yy, xx, cy, cx, ry, rx, rng):
    wobble = 1.0 + 0.15 * np.sin(np.arctan2(yy - cy, xx - cx) * int(rng.integers(2, 6)) + rng.uniform(0, 2 * math.pi))
    return ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= wobble


def synth_scene(rng: np.random.Generator, size: int) -> Tuple[np.ndarray, np.ndarray]:
    """生成一幅合成场景，返回 ((3,H,W) float32 图像, (H,W) uint8 掩码)"""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    mask = np.full((size, size), 5, dtype=np.uint8)

    def centre():
        return rng.uniform(0, size), rng.uniform(0, size)

    for _ in range(int(rng.integers(2, 5))):
        cy, cx = centre()
        mask[_blob(yy, xx, cy, cx, rng.uniform(0.12, 0.25) * size, rng.uniform(0.12, 0.25) * size, rng)] = 2
    for _ in range(int(rng.integers(1, 3))):
        cy, cx = centre()
        mask[_ribbon(yy, xx, cy, cx, rng.uniform(0.06, 0.1) * size, rng.uniform(0, math.pi))] = 0
    for _ in range(int(rng.integers(3, 7))):
        cy, cx = centre()
        r = rng.uniform(0.04, 0.08) * size
        mask[_blob(yy, xx, cy, cx, r, r, rng)] = 3
    for _ in range(int(rng.integers(2, 5))):
        cy, cx = centre()
        mask[_rotated_rect(yy, xx, cy, cx, rng.uniform(0.06, 0.12) * size, rng.uniform(0.06, 0.12) * size, rng.uniform(0, math.pi))] = 1
    for _ in range(int(rng.integers(1, 3))):
        cy, cx = centre()
        mask[_rotated_rect(yy, xx, cy, cx, 0.04 * size, 0.05 * size, rng.uniform(0, math.pi))] = 5
    car_len, car_wid = max(2.0, 0.022 * size), max(1.0, 0.011 * size)
    for _ in range(int(rng.integers(2, 7))):
        cy, cx = rng.uniform(0.05, 0.95, size=2) * size
        mask[_rotated_rect(yy, xx, cy, cx, car_wid, car_len, rng.uniform(0, math.pi))] = 4

    image = _CLASS_COLORS[mask].transpose(2, 0, 1).copy()
    phase = rng.uniform(0, 2 * math.pi, size=2)
    for k in range(len(_CLASS_COLORS)):
        region = mask == k
        if not region.any():
            continue
        f = _TEXTURE_FREQUENCY[k]
        pattern = np.sin(f * yy + phase[0]) * np.cos(f * xx + phase[1]) if f else 0.0
        tex = _TEXTURE_AMPLITUDE[k] * (pattern + rng.normal(0, 0.5, size=(size, size)))
        image[:, region] += tex[region] if np.ndim(tex) else tex
    image += rng.normal(0, 0.03, size=image.shape)
    return np.clip(image, 0.0, 1.0).astype(np.float32), mask


def synth_generate(seed: int, count: int, size: int = 256) -> List[TileSample]:
    """
    生成合成数据集；相同 seed 得到逐位相同的结果

    每个场景使用独立的子随机数流 (seed, index)，因此场景与生成数量无关。
    """
    if count < 0 or size <= 0:
        raise DataError(f"count 与 size 必须为正: count={count}, size={size}")
    samples = []
    for i in range(count):
        rng = np.random.default_rng([seed, i])
        image, mask = synth_scene(rng, size)
        samples.append(TileSample(image=image, mask=mask, source=f"synth_{seed}_{i:04d}"))
    logger.info(f"合成数据生成完成: {count} 幅 {size}×{size} 场景（seed={seed}）")
    return samples


def split_train_val(samples: Sequence[TileSample], val_fraction: float, seed: int) -> Tuple[List[TileSample], List[TileSample]]:
    """按 seed 固定地划分验证集（至少 1 幅，且至少留 1 幅训练）"""
    n = len(samples)
    if n == 0:
        raise DataError("数据集为空")
    n_val = min(n - 1, max(1, int(round(n * val_fraction)))) if n > 1 and val_fraction > 0 else 0
    order = np.random.default_rng(seed).permutation(n)
    val_idx = set(int(i) for i in order[:n_val])
    train = [s for i, s in enumerate(samples) if i not in val_idx]
    val = [s for i, s in enumerate(samples) if i in val_idx]
    return train, val


def class_histogram(mask: np.ndarray, num_classes: int = len(CLASS_NAMES)) -> np.ndarray:
    valid = mask[mask != IGNORE_INDEX].astype(np.int64)
    return np.bincount(valid, minlength=num_classes)[:num_classes]
