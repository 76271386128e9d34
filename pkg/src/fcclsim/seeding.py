"""Named random sub-streams derived from one root seed.

A stream is keyed by the root seed plus a path of names/integers, so adding
a new consumer never shifts the draws of existing ones.
"""

from __future__ import annotations

import zlib

import numpy as np


def _key(part) -> int:
    if isinstance(part, (int, np.integer)):
        return int(part)
    return zlib.crc32(str(part).encode("utf-8"))


def rng_for(seed: int, *path) -> np.random.Generator:
    return np.random.default_rng([int(seed), *(_key(p) for p in path)])


def derive_seed(seed: int, *path) -> int:
    """A plain integer seed for APIs that take ``(seed, epoch)`` pairs."""
    return int(rng_for(seed, *path).integers(0, 2**31 - 1))
