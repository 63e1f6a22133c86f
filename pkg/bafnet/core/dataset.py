"""
数据集目录读写与批处理

目录结构：
    {root}/{split}/images/*.png   8 位 RGB
    {root}/{split}/labels/*.png   调色板编码的标签
    {root}/{split}/manifest.txt   每行 "images/<name>.png labels/<name>.png"
"""

import logging
import os
import queue
import threading
from typing import Callable, Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from bafnet.core.data import DEFAULT_PALETTE, ClassPalette, TileSample
from bafnet.core.errors import DataError
from bafnet.utils.image_utils import read_rgb, to_chw_float, to_hwc_uint8, write_rgb

logger = logging.getLogger(__name__)

MANIFEST_FILE = "manifest.txt"

# ISPRS 官方训练/测试划分（仅作记录，数据集本身不随仓库分发）
ISPRS_SPLITS: Dict[str, Dict[str, List[str]]] = {
    "vaihingen": {
        "train": ["1", "3", "23", "26", "7", "11", "13", "28", "17", "32", "34", "37"],
        "test": ["5", "21", "15", "30"],
    },
    "potsdam": {
        "train": ["6_10", "7_10", "2_12", "3_11", "2_10", "7_8", "5_10", "3_12", "5_12",
                  "7_11", "7_9", "6_9", "7_7", "4_12", "6_8", "6_12", "6_7", "4_11"],
        "test": ["4_10", "5_11", "2_11", "3_10", "6_11", "7_12"],
    },
}


def isprs_areas(dataset: str, split: str) -> List[str]:
    """
    官方划分中某数据集某一部分的区域编号

    Raises:
        DataError: 未知的数据集或划分名
    """
    try:
        return list(ISPRS_SPLITS[dataset.lower()][split])
    except KeyError as e:
        raise DataError(f"没有 {dataset}/{split} 的官方划分记录") from e


def write_split(root: str, split: str, samples: Sequence[TileSample], palette: ClassPalette = DEFAULT_PALETTE) -> str:
    """把样本写成 PNG 对并生成 manifest，返回 split 目录"""
    base = os.path.join(root, split)
    lines = []
    for i, s in enumerate(samples):
        name = s.source or f"{split}_{i:05d}"
        image_rel, label_rel = f"images/{name}.png", f"labels/{name}.png"
        write_rgb(os.path.join(base, image_rel), to_hwc_uint8(s.image))
        write_rgb(os.path.join(base, label_rel), palette.encode(s.mask))
        lines.append(f"{image_rel} {label_rel}")
    with open(os.path.join(base, MANIFEST_FILE), "w", encoding="utf-8") as f:
        f.write("\n".join(lines) + ("\n" if lines else ""))
    logger.info(f"数据集已写出: {base}（{len(samples)} 对）")
    return base


def _manifest_pairs(base: str) -> List[Tuple[str, str]]:
    path = os.path.join(base, MANIFEST_FILE)
    if os.path.exists(path):
        pairs = []
        with open(path, "r", encoding="utf-8") as f:
            for lineno, line in enumerate(f, start=1):
                line = line.strip()
                if not line or line.startswith("#"):
                    continue
                parts = line.split()
                if len(parts) != 2:
                    raise DataError(f"{path}:{lineno} 应为 '图像 标签' 两列")
                pairs.append((parts[0], parts[1]))
        return pairs
    images_dir = os.path.join(base, "images")
    if not os.path.isdir(images_dir):
        raise DataError(f"找不到数据目录: {images_dir}")
    names = sorted(n for n in os.listdir(images_dir) if n.lower().endswith(".png"))
    return [(f"images/{n}", f"labels/{n}") for n in names]


def load_split(root: str, split: str, palette: ClassPalette = DEFAULT_PALETTE) -> List[TileSample]:
    """
    读取一个划分

    Raises:
        DataError: 目录或文件缺失、图像与标签尺寸不符、标签含调色板以外的颜色
    """
    base = os.path.join(root, split)
    samples = []
    for image_rel, label_rel in _manifest_pairs(base):
        image_path, label_path = os.path.join(base, image_rel), os.path.join(base, label_rel)
        if not os.path.exists(label_path):
            raise DataError(f"缺少标签文件: {label_path}")
        image = to_chw_float(read_rgb(image_path))
        try:
            mask = palette.decode(read_rgb(label_path))
        except DataError as e:
            raise DataError(f"{label_path}: {e}") from e
        if mask.shape != image.shape[1:]:
            raise DataError(f"{image_path} 与 {label_path} 尺寸不一致")
        source = os.path.splitext(os.path.basename(image_rel))[0]
        samples.append(TileSample(image=image, mask=mask, source=source))
    if not samples:
        raise DataError(f"数据集为空: {base}")
    logger.info(f"数据集已读取: {base}（{len(samples)} 对）")
    return samples


def iterate_batches(
    samples: Sequence[TileSample],
    batch_size: int,
    rng: Optional[np.random.Generator] = None,
    transform: Optional[Callable[[TileSample, np.random.Generator], TileSample]] = None,
    drop_last: bool = False,
) -> Iterator[Tuple[np.ndarray, np.ndarray]]:
    """
    按批产出 (images (B,3,H,W), masks (B,H,W))

    rng 不为 None 时先打乱顺序；transform 与打乱共用同一个 rng，因此结果只由 rng 状态决定。
    """
    order = rng.permutation(len(samples)) if rng is not None else np.arange(len(samples))
    for start in range(0, len(order), batch_size):
        idx = order[start:start + batch_size]
        if drop_last and len(idx) < batch_size:
            break
        batch = [samples[int(i)] for i in idx]
        if transform is not None:
            batch = [transform(s, rng) for s in batch]
        yield np.stack([s.image for s in batch]), np.stack([s.mask for s in batch])


_DONE = object()


class Prefetcher:
    """
    用后台线程预先取出迭代器的元素，放入有界队列

    产出顺序与源迭代器相同；源迭代器抛出的异常会在消费端重新抛出。
    """

    def __init__(self, source: Iterator, depth: int = 2):
        if depth <= 0:
            raise ValueError("预取深度必须为正")
        self._queue: "queue.Queue" = queue.Queue(maxsize=depth)
        self._stop = threading.Event()
        self._thread = threading.Thread(target=self._run, args=(source,), daemon=True)
        self._thread.start()

    def _put(self, item) -> bool:
        while not self._stop.is_set():
            try:
                self._queue.put(item, timeout=0.1)
                return True
            except queue.Full:
                continue
        return False

    def _run(self, source: Iterator) -> None:
        try:
            for item in source:
                if not self._put(item):
                    return
        except BaseException as e:
            logger.error(f"预取线程出错: {e}")
            self._put(e)
            return
        self._put(_DONE)

    def __iter__(self) -> "Prefetcher":
        return self

    def __next__(self):
        item = self._queue.get()
        if item is _DONE:
            raise StopIteration
        if isinstance(item, BaseException):
            raise item
        return item

    def close(self) -> None:
        self._stop.set()
        self._thread.join(timeout=1.0)
