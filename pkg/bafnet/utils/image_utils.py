import io
import logging
import os
from typing import Union

import numpy as np
from PIL import Image

from bafnet.core.errors import DataError

logger = logging.getLogger(__name__)

PathOrBuffer = Union[str, io.BytesIO]


def read_rgb(source: PathOrBuffer) -> np.ndarray:
    """
    读取 8 位 RGB 图像

    Returns:
        (H, W, 3) uint8 数组

    Raises:
        DataError: 文件无法解码
    """
    try:
        with Image.open(source) as img:
            return np.asarray(img.convert("RGB"), dtype=np.uint8).copy()
    except (OSError, ValueError) as e:
        logger.error(f"读取图像失败: {e}")
        raise DataError(f"无法解码图像: {e}") from e


def write_rgb(path: str, rgb: np.ndarray) -> None:
    """把 (H, W, 3) uint8 数组写成 PNG"""
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    Image.fromarray(np.ascontiguousarray(rgb, dtype=np.uint8), mode="RGB").save(path, format="PNG")


def rgb_to_png_bytes(rgb: np.ndarray) -> bytes:
    buffer = io.BytesIO()
    Image.fromarray(np.ascontiguousarray(rgb, dtype=np.uint8), mode="RGB").save(buffer, format="PNG")
    return buffer.getvalue()


def write_gray(path: str, values: np.ndarray) -> None:
    """把 [0, 1] 范围的二维数组写成 8 位灰度 PNG"""
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    arr = np.clip(np.round(values * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr, mode="L").save(path, format="PNG")


def to_chw_float(rgb: np.ndarray) -> np.ndarray:
    """(H, W, 3) uint8 -> (3, H, W) float32，取值 [0, 1]"""
    if rgb.ndim != 3 or rgb.shape[2] != 3:
        raise DataError(f"期望 (H, W, 3) 的 RGB 数组，实际 {rgb.shape}")
    return np.transpose(rgb.astype(np.float32) / 255.0, (2, 0, 1))


def to_hwc_uint8(image: np.ndarray) -> np.ndarray:
    """(3, H, W) [0, 1] -> (H, W, 3) uint8"""
    return np.clip(np.round(np.transpose(image, (1, 2, 0)) * 255.0), 0, 255).astype(np.uint8)


def normalize_map(values: np.ndarray) -> np.ndarray:
    """最小-最大归一化到 [0, 1]；常数图返回全 0"""
    lo, hi = float(values.min()), float(values.max())
    if hi - lo <= 0:
        return np.zeros_like(values, dtype=np.float64)
    return (values - lo) / (hi - lo)
