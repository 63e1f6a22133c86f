import logging
import os

from dotenv import load_dotenv
from fastapi import FastAPI
from fastapi.middleware.cors import CORSMiddleware

from bafnet.api.health_routes import router as health_router
from bafnet.api.model_routes import router as model_router
from bafnet.core.config import get_settings

load_dotenv()

settings = get_settings()
logging.basicConfig(
    level=getattr(logging, settings.log_level.upper(), logging.INFO),
    format='%(asctime)s - %(name)s - %(levelname)s - %(message)s'
)
logger = logging.getLogger(__name__)

app = FastAPI(
    title="BAFNet 遥感语义分割服务",
    description="双路径遥感语义分割网络的模型检查与推理API服务",
    version="1.0.0",
    docs_url="/docs",
    redoc_url="/redoc"
)

app.add_middleware(
    CORSMiddleware,
    allow_origins=["*"],
    allow_credentials=True,
    allow_methods=["*"],
    allow_headers=["*"],
)

app.include_router(model_router)
app.include_router(health_router)


@app.on_event("startup")
async def report_checkpoint() -> None:
    """启动时检查推理检查点是否可用"""
    path = get_settings().checkpoint_path
    if not path:
        logger.warning("未设置 CHECKPOINT_PATH，/predict 将返回 503")
    elif not os.path.exists(path):
        logger.warning(f"检查点文件不存在: {path}")
    else:
        logger.info(f"推理检查点: {path}")


logger.info("FastAPI应用初始化完成")
