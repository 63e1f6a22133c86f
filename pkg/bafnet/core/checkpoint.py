"""
检查点：模型参数与缓冲区、优化器动量、轮次、随机数状态与配置哈希

容器格式见 bafnet.utils.file_utils.write_tensor_archive；模型数组以 model/ 为前缀，
优化器动量以 optim/ 为前缀。
"""

import logging
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional

import numpy as np

from bafnet.core.errors import CheckpointError, ShapeError
from bafnet.core.fusion import BafnetModel
from bafnet.core.optim import AdamW
from bafnet.core.tensor import default_dtype
from bafnet.schemas.schemas import ModelConfig, TrainConfig
from bafnet.utils.file_utils import read_tensor_archive, write_tensor_archive

logger = logging.getLogger(__name__)


@dataclass
class Checkpoint:
    model_config: ModelConfig
    model_state: Dict[str, np.ndarray]
    optim_state: Dict[str, np.ndarray] = field(default_factory=dict)
    epoch: int = 0
    step: int = 0
    optim_steps: int = 0
    rng_state: Optional[Dict[str, Any]] = None
    train_config: Optional[TrainConfig] = None
    history: List[Dict[str, Any]] = field(default_factory=list)
    dtype: str = "float32"

    def build_model(self) -> BafnetModel:
        """按检查点中的配置与精度重建模型并载入参数"""
        with default_dtype(np.dtype(self.dtype)):
            model = BafnetModel(self.model_config)
        try:
            model.load_state_arrays(self.model_state)
        except ShapeError as e:
            raise CheckpointError(f"检查点参数与模型结构不符: {e}") from e
        return model

    def restore_optimizer(self, optimizer: AdamW) -> None:
        if self.optim_state:
            optimizer.load_state_arrays(self.optim_state, self.optim_steps)

    def generator(self) -> np.random.Generator:
        rng = np.random.default_rng()
        if self.rng_state is not None:
            rng.bit_generator.state = self.rng_state
        return rng


def save_checkpoint(
    path: str,
    model: BafnetModel,
    optimizer: Optional[AdamW] = None,
    epoch: int = 0,
    step: int = 0,
    rng: Optional[np.random.Generator] = None,
    train_config: Optional[TrainConfig] = None,
    history: Optional[List[Dict[str, Any]]] = None,
) -> None:
    arrays: Dict[str, np.ndarray] = {}
    for name, arr in model.state_arrays().items():
        arrays[f"model/{name}"] = arr
    if optimizer is not None:
        for name, arr in optimizer.state_arrays().items():
            arrays[f"optim/{name}"] = arr
    params = model.parameters()
    meta = {
        "config_hash": model.config.config_hash(),
        "model_config": model.config.model_dump(mode="json"),
        "train_config": train_config.model_dump(mode="json") if train_config else None,
        "epoch": epoch,
        "step": step,
        "optim_steps": optimizer.step_count if optimizer else 0,
        "rng_state": rng.bit_generator.state if rng is not None else None,
        "history": history or [],
        "dtype": str(params[0].dtype) if params else "float32",
    }
    write_tensor_archive(path, arrays, meta)
    logger.info(f"检查点已保存: {path}（epoch={epoch}, step={step}）")


def load_checkpoint(path: Any, expected: Optional[ModelConfig] = None) -> Checkpoint:
    """
    读取检查点并校验配置哈希

    Raises:
        CheckpointError: 归档损坏、哈希与记录的配置不符，或与 expected 不一致
    """
    arrays, meta = read_tensor_archive(path)
    try:
        config = ModelConfig(**meta["model_config"])
    except Exception as e:
        raise CheckpointError(f"检查点中的模型配置无效: {e}") from e
    if config.config_hash() != meta.get("config_hash"):
        raise CheckpointError("检查点配置哈希与记录的模型配置不一致，文件可能已损坏")
    if expected is not None and expected.config_hash() != config.config_hash():
        raise CheckpointError(
            f"检查点配置哈希 {config.config_hash()[:12]} 与当前配置 {expected.config_hash()[:12]} 不符"
        )
    model_state = {k[len("model/"):]: v for k, v in arrays.items() if k.startswith("model/")}
    optim_state = {k[len("optim/"):]: v for k, v in arrays.items() if k.startswith("optim/")}
    train_config = TrainConfig(**meta["train_config"]) if meta.get("train_config") else None
    logger.info(f"检查点已载入: epoch={meta.get('epoch', 0)}, 配置哈希 {config.config_hash()[:12]}")
    return Checkpoint(
        model_config=config, model_state=model_state, optim_state=optim_state,
        epoch=int(meta.get("epoch", 0)), step=int(meta.get("step", 0)),
        optim_steps=int(meta.get("optim_steps", 0)), rng_state=meta.get("rng_state"),
        train_config=train_config, history=list(meta.get("history", [])),
        dtype=meta.get("dtype", "float32"),
    )
