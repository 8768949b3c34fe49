import numpy as np
import pytest

from streamtrack.config import ModelConfig


def tiny_config(**overrides) -> ModelConfig:
    base = dict(dim=8, heads=2, frame_hw=(16, 16), enc_channels=(4, 6),
                topk=2, memory_size=3, temperature=0.5)
    base.update(overrides)
    return ModelConfig(**base)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
