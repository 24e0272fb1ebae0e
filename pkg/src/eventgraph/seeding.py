"""Named random substreams derived from one root seed."""
from __future__ import annotations

import zlib

import numpy as np


def stream_key(*names) -> list[int]:
    return [zlib.crc32(str(n).encode()) for n in names]


def substream(seed: int, *names) -> np.random.Generator:
    """Generator for ``names`` under ``seed``; same inputs give the same stream."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), *stream_key(*names)]))


def subseed(seed: int, *names) -> int:
    return int(substream(seed, *names).integers(0, 2**31 - 1))
