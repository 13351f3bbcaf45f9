"""Named random sub-streams derived from a single run seed."""

import zlib

import numpy as np


def substream(seed: int, name: str, *extra: int) -> np.random.Generator:
    """Independent generator for one consumer (``"split"``, ``"init"``, ...)."""
    return np.random.default_rng([int(seed), zlib.crc32(name.encode()), *map(int, extra)])
