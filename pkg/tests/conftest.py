import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from sfmamba.model import Model, ModelConfig


@pytest.fixture
def micro_config():
    """2x2-grid configuration small enough for finite differences."""
    return ModelConfig(
        grid=(2, 2), patch_dim=3, embed_dim=4, n_encoder_blocks=1,
        state_dim=2, n_chvss=1, n_classes=3,
    )


@pytest.fixture
def micro_model(micro_config):
    return Model(micro_config, seed=11)


@pytest.fixture
def micro_batch(micro_config):
    rng = np.random.default_rng(5)
    x = rng.normal(size=(2,) + micro_config.grid + (micro_config.patch_dim,))
    y = np.array([0, 2])
    return x, y
