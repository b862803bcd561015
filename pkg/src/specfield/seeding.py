"""Named random sub-streams derived from one run seed."""

import zlib

import numpy as np


def substream(seed: int, name: str, *extra: int) -> np.random.Generator:
    """Generator for stream ``name``; toggling one stream never shifts another."""
    return np.random.default_rng([int(seed), zlib.crc32(name.encode()), *map(int, extra)])
