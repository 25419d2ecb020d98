"""Named random substreams derived from a single integer seed."""

import zlib

import numpy as np


def substream(seed: int, name: str, *extra: int) -> np.random.Generator:
    """Independent PCG64 generator for stage ``name`` (e.g. ``"init"``, ``"shuffle"``)."""
    key = [int(seed) & 0xFFFFFFFFFFFFFFFF, zlib.crc32(name.encode("utf-8")), *map(int, extra)]
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(key)))
