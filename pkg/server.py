#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
BAFNet 遥感语义分割服务入口文件
"""

import logging
import os
import sys

from dotenv import load_dotenv

load_dotenv()
sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

from bafnet.core.config import get_settings

logger = logging.getLogger(__name__)


def run() -> None:
    """按 AppSettings 启动 uvicorn"""
    import uvicorn

    settings = get_settings()
    logging.basicConfig(
        level=getattr(logging, settings.log_level.upper(), logging.INFO),
        format='%(asctime)s - %(name)s - %(levelname)s - %(message)s'
    )
    logger.info(f"正在启动BAFNet推理服务: host={settings.app_host}, port={settings.app_port}, reload={settings.app_reload}")
    try:
        uvicorn.run(
            "bafnet.main:app",
            host=settings.app_host,
            port=settings.app_port,
            reload=settings.app_reload,
            log_level=settings.log_level.lower()
        )
    except Exception as e:
        logger.error(f"启动服务失败: {str(e)}")
        raise


if __name__ == "__main__":
    run()
