"""
异常定义

所有核心模块抛出的错误都继承自 BafnetError，CLI 与 HTTP 层据此映射退出码和状态码。
"""

from typing import Any, Dict, Optional


class BafnetError(Exception):
    """BAFNet 所有异常的基类"""


class ShapeError(BafnetError, ValueError):
    """张量形状、分辨率或通道数不满足算子前置条件"""


class ConfigError(BafnetError, ValueError):
    """配置文件或命令行参数非法"""


class DataError(BafnetError):
    """数据内容非法：未知调色板颜色、非法 one-hot、类别数不一致等"""


class CheckpointError(BafnetError):
    """检查点归档损坏或与当前配置不匹配"""


class NumericError(BafnetError, ArithmeticError):
    """前向或反向传播中出现 NaN/Inf"""

    def __init__(self, message: str, diagnostics: Optional[Dict[str, Any]] = None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}

    def __str__(self) -> str:
        base = super().__str__()
        if not self.diagnostics:
            return base
        details = ", ".join(f"{k}={v}" for k, v in self.diagnostics.items())
        return f"{base} ({details})"
