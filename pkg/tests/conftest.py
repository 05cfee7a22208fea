import numpy as np
import pytest

from spikevid.model import ModelConfig


def make_rng(seed=0):
    return np.random.Generator(np.random.PCG64(seed))


@pytest.fixture
def rng():
    return make_rng(0)


def tiny_config(**overrides):
    """Smallest config exercising every block type; fast enough for unit tests."""
    base = dict(
        stage_depths=(1, 1, 1, 1), channels=(4, 4, 4, 4), time_steps=2,
        in_height=16, in_width=16, num_classes=3,
    )
    base.update(overrides)
    return ModelConfig(**base)
