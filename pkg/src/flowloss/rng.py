"""Named, splittable random streams.

A stream is addressed by a root seed plus a path of names and indices, e.g.
``stream(seed, "noise", step, sample)``.  Two calls with the same address
always yield generators in the same state, independent of call order, which
is what keeps parallel or reordered execution reproducible.
"""

from __future__ import annotations

import zlib

import numpy as np


def _key(part: str | int) -> int:
    if isinstance(part, (int, np.integer)):
        if part < 0:
            raise ValueError(f"stream index must be non-negative, got {part}")
        return int(part)
    return zlib.crc32(str(part).encode("utf-8"))


def stream(seed: int, *path: str | int) -> np.random.Generator:
    seq = np.random.SeedSequence(int(seed), spawn_key=tuple(_key(p) for p in path))
    return np.random.Generator(np.random.PCG64(seq))
