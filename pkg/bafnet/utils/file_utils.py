import io
import json
import os
import zipfile
import logging
from typing import Any, BinaryIO, Dict, Mapping, Optional, Tuple

import numpy as np

from bafnet.core.errors import CheckpointError, DataError

logger = logging.getLogger(__name__)

ARCHIVE_FORMAT = "bafnet-tensor-archive"
ARCHIVE_VERSION = 1
MANIFEST_NAME = "manifest.json"
PNG_SIGNATURE = b"\x89PNG\r\n\x1a\n"


def write_tensor_archive(
    path: str,
    arrays: Mapping[str, np.ndarray],
    meta: Optional[Dict[str, Any]] = None,
) -> None:
    """
    把一组命名数组写入 ZIP 归档

    归档包含 manifest.json 与每个数组一个成员文件；成员内容为行优先、小端序的原始字节，
    manifest 的每个条目记录 (name, dtype, shape, member)。meta 原样写入 manifest。

    Args:
        path: 输出文件路径
        arrays: 名称到数组的有序映射
        meta: 额外元数据（配置哈希、轮次、随机数状态等），必须可 JSON 序列化
    """
    logger.info(f"正在写入张量归档: {path}（{len(arrays)} 个数组）")
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    entries = []
    tmp_path = f"{path}.tmp"
    try:
        with zipfile.ZipFile(tmp_path, "w", compression=zipfile.ZIP_DEFLATED) as zf:
            for i, (name, arr) in enumerate(arrays.items()):
                arr = np.asarray(arr)
                little = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
                member = f"tensors/{i:05d}.bin"
                zf.writestr(member, np.ascontiguousarray(little).tobytes(order="C"))
                entries.append({"name": name, "dtype": little.dtype.str, "shape": list(arr.shape), "member": member})
            manifest = {"format": ARCHIVE_FORMAT, "version": ARCHIVE_VERSION, "entries": entries, "meta": meta or {}}
            zf.writestr(MANIFEST_NAME, json.dumps(manifest, indent=2, sort_keys=True))
        os.replace(tmp_path, path)
    except Exception as e:
        logger.error(f"写入张量归档时出错: {e}")
        if os.path.exists(tmp_path):
            os.remove(tmp_path)
        raise
    logger.info(f"张量归档写入完成: {path}")


def read_tensor_archive(source: Any) -> Tuple[Dict[str, np.ndarray], Dict[str, Any]]:
    """
    读取 write_tensor_archive 写出的归档

    Args:
        source: 文件路径或二进制流

    Returns:
        (名称到数组的有序字典, meta)

    Raises:
        CheckpointError: 不是有效的 ZIP、缺少 manifest、格式不符或成员大小与形状不一致
    """
    try:
        with zipfile.ZipFile(source, "r") as zf:
            try:
                manifest = json.loads(zf.read(MANIFEST_NAME).decode("utf-8"))
            except KeyError as e:
                raise CheckpointError(f"归档缺少 {MANIFEST_NAME}") from e
            if manifest.get("format") != ARCHIVE_FORMAT:
                raise CheckpointError(f"未知的归档格式: {manifest.get('format')}")
            arrays: Dict[str, np.ndarray] = {}
            for entry in manifest["entries"]:
                dtype = np.dtype(entry["dtype"])
                shape = tuple(entry["shape"])
                payload = zf.read(entry["member"])
                expected = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
                if len(payload) != expected:
                    raise CheckpointError(f"{entry['name']} 的数据长度 {len(payload)} 与形状 {shape} 不符")
                arr = np.frombuffer(payload, dtype=dtype).reshape(shape)
                arrays[entry["name"]] = arr.astype(dtype.newbyteorder("="))
    except zipfile.BadZipFile as e:
        logger.error("无效的ZIP文件格式")
        raise CheckpointError(f"无效的归档文件: {e}") from e
    return arrays, manifest.get("meta", {})


def read_png_upload(filename: str, file: BinaryIO, max_size: int) -> io.BytesIO:
    """
    读取上传的 PNG 图像到内存

    Raises:
        DataError: 扩展名不是 .png、超过 max_size 字节或文件头不是 PNG 签名
    """
    if os.path.splitext(filename)[1].lower() != ".png":
        raise DataError(f"只支持上传PNG格式的图像: '{filename}'")
    data = file.read(max_size + 1)
    if len(data) > max_size:
        raise DataError(f"上传文件超过大小限制 {max_size} 字节")
    if not data.startswith(PNG_SIGNATURE):
        raise DataError(f"'{filename}' 的内容不是PNG图像")
    logger.debug(f"已读取上传图像 '{filename}': {len(data)} 字节")
    return io.BytesIO(data)
