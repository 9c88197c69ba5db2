import numpy as np
import pytest

from mat.config import ModelConfig


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def small_config(**overrides) -> ModelConfig:
    """Fast config used across model-level tests."""
    base = dict(embed_dim=16, num_heads=4, long_len=16, short_len=4, num_segments=4,
                num_long_queries=4, num_latent_queries=4, future_seconds=2.0, fps=4,
                num_rounds=2, renewal=1, num_classes=3, steps=0, batch_size=2, seed=7)
    base.update(overrides)
    return ModelConfig(**base).validate()


@pytest.fixture
def config():
    return small_config()
