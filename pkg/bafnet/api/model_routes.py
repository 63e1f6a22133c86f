from fastapi import APIRouter, Depends, File, HTTPException, UploadFile
from fastapi.responses import Response
import logging
import os
from functools import lru_cache

from bafnet.core.checkpoint import Checkpoint, load_checkpoint
from bafnet.core.config import AppSettings, get_settings
from bafnet.core.data import DEFAULT_PALETTE
from bafnet.core.errors import BafnetError, CheckpointError, ConfigError, DataError, ShapeError
from bafnet.core.trainer import inspect, predict
from bafnet.schemas.schemas import ComplexityReport, InspectRequest
from bafnet.utils.file_utils import read_png_upload
from bafnet.utils.image_utils import read_rgb, rgb_to_png_bytes, to_chw_float

logger = logging.getLogger(__name__)
router = APIRouter()


@lru_cache(maxsize=2)
def _cached_checkpoint(path: str, mtime: float) -> Checkpoint:
    return load_checkpoint(path)


def get_checkpoint(settings: AppSettings = Depends(get_settings)) -> Checkpoint:
    """载入 CHECKPOINT_PATH 指向的检查点；文件修改后自动重新载入"""
    path = settings.checkpoint_path
    if not path or not os.path.exists(path):
        logger.error(f"未配置可用的检查点: {path}")
        raise HTTPException(status_code=503, detail="服务未配置模型检查点")
    try:
        return _cached_checkpoint(path, os.path.getmtime(path))
    except CheckpointError as e:
        logger.error(f"检查点载入失败: {e}")
        raise HTTPException(status_code=503, detail="模型检查点无法载入")


@router.post("/inspect", response_model=ComplexityReport, tags=["模型"])
def inspect_model(request: InspectRequest):
    """
    统计模型参数量与 FLOPs

    - **model**: 模型结构配置（缺省为完整网络）
    - **input_size**: 输入边长，必须是网络输入倍数的整数倍
    """
    try:
        return inspect(request.model, request.input_size)
    except (ShapeError, ConfigError) as e:
        logger.error(f"模型检查参数错误: {e}")
        raise HTTPException(status_code=400, detail=str(e))
    except Exception as e:
        logger.error(f"模型检查时发生错误: {e}")
        raise HTTPException(status_code=500, detail="模型检查时发生错误")


@router.post("/predict", tags=["模型"])
def predict_image(
    image: UploadFile = File(..., description="8位RGB的PNG图像"),
    settings: AppSettings = Depends(get_settings),
    checkpoint: Checkpoint = Depends(get_checkpoint),
):
    """
    对上传的图像做语义分割

    返回按 ISPRS 图例着色的 PNG。
    """
    try:
        rgb = read_rgb(read_png_upload(image.filename or "", image.file, settings.max_file_size))
    except DataError as e:
        logger.error(f"读取上传图像失败: {e}")
        raise HTTPException(status_code=400, detail=str(e))

    try:
        logger.info(f"开始推理，图像尺寸 {rgb.shape[1]}×{rgb.shape[0]}")
        mask = predict(checkpoint, to_chw_float(rgb))
    except (ShapeError, DataError) as e:
        logger.error(f"推理输入错误: {e}")
        raise HTTPException(status_code=400, detail=str(e))
    except BafnetError as e:
        logger.error(f"推理时发生错误: {e}")
        raise HTTPException(status_code=500, detail="推理时发生错误")

    logger.info("推理完成")
    return Response(content=rgb_to_png_bytes(DEFAULT_PALETTE.encode(mask)), media_type="image/png")
