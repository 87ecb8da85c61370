"""Deterministic seeded random streams.

Every source of randomness in the simulator is a substream derived from the
master seed plus a structured key (phase, round, client, ...).  Streams are
independent of each other and of execution order, so parallel scheduling of
clients can never change results.
"""

from __future__ import annotations

import zlib

import numpy as np


def _encode(part: int | str) -> int:
    if isinstance(part, bool):
        raise TypeError("bool is not a valid stream key part")
    if isinstance(part, int):
        if part < 0:
            raise ValueError(f"stream key parts must be non-negative, got {part}")
        return part
    # Stable across processes, unlike built-in hash().
    return zlib.crc32(part.encode("utf-8"))


def substream(master_seed: int, *key: int | str) -> np.random.Generator:
    """Independent generator for (master_seed, *key).

    The same (seed, key) always yields the same stream; distinct keys yield
    statistically independent streams via SeedSequence entropy mixing.
    """
    entropy = [_encode(master_seed)] + [_encode(part) for part in key]
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))
