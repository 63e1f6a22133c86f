import os

from fastapi import APIRouter, Depends

from bafnet.core.config import AppSettings, get_settings
from bafnet.schemas.schemas import ABLATION_PRESETS, CLASS_NAMES, HealthStatus

router = APIRouter()


@router.get("/", tags=["系统"])
async def root():
    """
    API根路径

    返回服务说明、可用端点、类别与消融配置列表
    """
    return {
        "message": "BAFNet 遥感语义分割API",
        "version": "1.0.0",
        "endpoints": {
            "inspect": "POST /inspect - 统计模型参数量与FLOPs",
            "predict": "POST /predict - 上传PNG图像，返回调色板编码的分割结果",
            "health": "GET /health - 健康检查",
        },
        "classes": CLASS_NAMES,
        "presets": ABLATION_PRESETS,
        "documentation": {"swagger": "/docs", "redoc": "/redoc"},
    }


@router.get("/health", response_model=HealthStatus, tags=["系统"])
async def health_check(settings: AppSettings = Depends(get_settings)):
    """健康检查；checkpoint_configured 表示 CHECKPOINT_PATH 指向的文件存在"""
    path = settings.checkpoint_path
    return HealthStatus(status="healthy", checkpoint_configured=bool(path and os.path.exists(path)))
