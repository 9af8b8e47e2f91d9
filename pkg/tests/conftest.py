import numpy as np
import pytest

from anodfd.model import AnoDFDNet, ModelConfig


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


MICRO = ModelConfig(input_h=16, input_w=16, input_c=1, stages=1, channels=(4,), layers=1,
                    embed_dim=8, heads=2, mlp_ratio=2, seed=3)

SMALL = ModelConfig(input_h=32, input_w=32, input_c=1, stages=2, channels=(4, 8), layers=2,
                    embed_dim=8, heads=2, mlp_ratio=2, seed=5)


@pytest.fixture
def micro_model():
    return AnoDFDNet(MICRO, dtype=np.float64)


@pytest.fixture
def small_model():
    return AnoDFDNet(SMALL, dtype=np.float64)
