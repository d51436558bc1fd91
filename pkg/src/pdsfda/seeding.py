"""Named random sub-streams derived from a single run seed."""

import zlib

import numpy as np


def stream(seed: int, name: str, *extra: int) -> np.random.Generator:
    """Independent generator for ``(seed, name, *extra)``.

    The name is hashed with crc32 so the mapping is stable across processes
    (unlike ``hash``).
    """
    key = [int(seed) & 0xFFFFFFFF, zlib.crc32(name.encode())] + [int(e) for e in extra]
    return np.random.default_rng(np.random.SeedSequence(key))
