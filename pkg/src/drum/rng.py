"""Named random streams.

Every random draw in the package comes from a stream keyed by
``(run seed, purpose tag, *indices)``, so results do not depend on the order
in which independent pieces of work are executed.
"""

from __future__ import annotations

import zlib

import numpy as np


def tag_id(tag: str) -> int:
    return zlib.crc32(tag.encode("utf-8"))


def stream(seed: int, tag: str, *index: int) -> np.random.Generator:
    """Return an independent generator for ``(seed, tag, *index)``."""
    key = [int(seed) & 0xFFFFFFFFFFFFFFFF, tag_id(tag), *(int(i) for i in index)]
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(key)))


def child_seed(seed: int, tag: str, *index: int) -> int:
    """Derive a 63-bit integer seed for a sub-stage."""
    return int(stream(seed, tag, *index).integers(0, 2**63 - 1))
