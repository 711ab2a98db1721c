"""Deterministic random streams.

Every source of randomness in the package is a Philox generator derived
from a single 64-bit seed plus a tuple of stream labels. Philox is
counter-based, so streams with different labels are independent and the
mapping (seed, labels) -> stream is stable across runs and platforms.
"""

from __future__ import annotations

import zlib

import numpy as np


def _label_to_int(label: int | str) -> int:
    if isinstance(label, int):
        return label & 0xFFFFFFFF
    return zlib.crc32(label.encode("utf-8"))


def stream(seed: int, *labels: int | str) -> np.random.Generator:
    """Return the generator for the stream named by ``labels`` under ``seed``."""
    key = tuple(_label_to_int(x) for x in labels)
    ss = np.random.SeedSequence(entropy=seed, spawn_key=key)
    return np.random.Generator(np.random.Philox(ss))
