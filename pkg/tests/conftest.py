"""Shared fixtures: the tiny desk-scale config and random config sampling."""

import numpy as np
import pytest

from crossdense.model import DccConfig


def tiny_config(seed=0, dropout=0.0, classes=2):
    """Small 3-path config that builds and trains in seconds."""
    return DccConfig(
        growth_rate=2,
        stem_channels=4,
        num_paths=3,
        blocks_per_path=2,
        layers_per_block=[[1, 1], [1, 1], [1, 1]],
        compression=0.5,
        dropout_rate=dropout,
        num_classes=classes,
        input_shape=(3, 16, 16),
        seed=seed,
    )


@pytest.fixture
def tiny_cfg():
    return tiny_config()


def random_valid_config(rng: np.random.Generator) -> DccConfig:
    """Sample a config whose spatial bookkeeping is guaranteed feasible."""
    num_paths = int(rng.integers(2, 5))
    blocks = int(rng.integers(1, 4))
    layers = [[int(rng.integers(1, 4)) for _ in range(blocks)]
              for _ in range(num_paths)]
    # stem divides H by 4; each of the (blocks-1) transitions needs an even input
    h = 4 * (2 ** (blocks - 1)) * int(rng.integers(1, 3))
    h = max(h, 8)
    return DccConfig(
        growth_rate=int(rng.integers(1, 6)),
        stem_channels=int(rng.integers(1, 9)),
        num_paths=num_paths,
        blocks_per_path=blocks,
        layers_per_block=layers,
        compression=float(rng.choice([0.34, 0.5, 0.75, 1.0])),
        dropout_rate=0.0,
        num_classes=int(rng.integers(2, 6)),
        input_shape=(3, h, h),
        seed=int(rng.integers(0, 2**31)),
    )
