import numpy as np
import pytest

from bafnet.core.tensor import default_dtype
from bafnet.schemas.schemas import ModelConfig, TrainConfig

TINY_MODEL = dict(
    dep_channels=(8, 16, 32, 32),
    dep_depths=(1, 1, 1, 1),
    dep_mlp_ratios=(2, 2, 2, 2),
    rl_channels=16,
    rl_depths=(1, 1, 1),
    window_size=2,
    num_heads=2,
    rl_mlp_ratio=2,
)

TINY_FLAGS = [
    "--dep-channels", "8", "16", "32", "32",
    "--dep-depths", "1", "1", "1", "1",
    "--dep-mlp-ratios", "2", "2", "2", "2",
    "--rl-channels", "16",
    "--rl-depths", "1", "1", "1",
    "--window-size", "2",
    "--num-heads", "2",
    "--rl-mlp-ratio", "2",
]


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def double():
    """在 float64 下创建参数"""
    with default_dtype(np.float64):
        yield


@pytest.fixture
def tiny_config():
    return ModelConfig(**TINY_MODEL)


@pytest.fixture
def tiny_cp_config():
    return ModelConfig.preset("cp", **TINY_MODEL)


@pytest.fixture
def quick_train_config():
    return TrainConfig(seed=0, epochs=1, batch_size=4, crop_size=64, prefetch=0, log_every=0)
