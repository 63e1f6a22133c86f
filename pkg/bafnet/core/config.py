"""
配置读取

- AppSettings：服务与进程级设置，来自环境变量与 .env
- 实验配置：YAML 键值文件，键为 ModelConfig 与 TrainConfig 字段名的并集；命令行可逐项覆盖
"""

import logging
from typing import Any, Dict, Mapping, Optional, Tuple

import yaml
from pydantic import ValidationError
from pydantic_settings import BaseSettings, SettingsConfigDict

from bafnet.core.errors import ConfigError
from bafnet.schemas.schemas import ModelConfig, TrainConfig

logger = logging.getLogger(__name__)


class AppSettings(BaseSettings):
    model_config = SettingsConfigDict(env_file=".env", env_file_encoding="utf-8", extra="ignore")

    app_host: str = "0.0.0.0"
    app_port: int = 8000
    app_reload: bool = False
    log_level: str = "INFO"
    checkpoint_path: Optional[str] = None
    data_root: str = "data"
    max_file_size: int = 20 * 1024 * 1024


def get_settings() -> AppSettings:
    return AppSettings()


MODEL_KEYS = frozenset(ModelConfig.model_fields)
TRAIN_KEYS = frozenset(TrainConfig.model_fields)


def read_config_file(path: str) -> Dict[str, Any]:
    """
    读取 YAML 键值配置

    Raises:
        ConfigError: 文件无法解析或顶层不是映射
    """
    try:
        with open(path, "r", encoding="utf-8") as f:
            data = yaml.safe_load(f)
    except OSError as e:
        raise ConfigError(f"无法读取配置文件 {path}: {e}") from e
    except yaml.YAMLError as e:
        raise ConfigError(f"配置文件 {path} 不是合法的 YAML: {e}") from e
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ConfigError(f"配置文件 {path} 的顶层必须是键值映射")
    return data


def split_config(values: Mapping[str, Any], preset: Optional[str] = None) -> Tuple[ModelConfig, TrainConfig]:
    """
    把合并后的键值拆分为 (ModelConfig, TrainConfig)

    Raises:
        ConfigError: 未知键或字段校验失败
    """
    unknown = sorted(set(values) - MODEL_KEYS - TRAIN_KEYS)
    if unknown:
        raise ConfigError(f"未知的配置项: {', '.join(unknown)}")
    model_values = {k: v for k, v in values.items() if k in MODEL_KEYS}
    train_values = {k: v for k, v in values.items() if k in TRAIN_KEYS}
    try:
        model = ModelConfig.preset(preset, **model_values) if preset else ModelConfig(**model_values)
        train = TrainConfig(**train_values)
    except (ValidationError, ValueError) as e:
        raise ConfigError(f"配置无效: {e}") from e
    return model, train


def load_config(
    path: Optional[str] = None,
    overrides: Optional[Mapping[str, Any]] = None,
    preset: Optional[str] = None,
) -> Tuple[ModelConfig, TrainConfig]:
    """配置文件的值先载入，再由 overrides（通常来自命令行）覆盖"""
    values: Dict[str, Any] = read_config_file(path) if path else {}
    for k, v in (overrides or {}).items():
        if v is not None:
            values[k] = v
    model, train = split_config(values, preset)
    logger.debug(f"配置已载入: 模型哈希 {model.config_hash()[:12]}")
    return model, train


def dump_config(model: ModelConfig, train: TrainConfig, path: str) -> None:
    payload = {**model.model_dump(mode="json"), **train.model_dump(mode="json")}
    with open(path, "w", encoding="utf-8") as f:
        yaml.safe_dump(payload, f, sort_keys=True, allow_unicode=True)
