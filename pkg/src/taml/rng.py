"""Counter-style RNG streams: one independent generator per (seed, purpose, index)."""

from __future__ import annotations

import zlib

import numpy as np

_TAGS: dict[str, int] = {}


def _tag(purpose: str) -> int:
    if purpose not in _TAGS:
        _TAGS[purpose] = zlib.crc32(purpose.encode())
    return _TAGS[purpose]


def stream(seed: int, purpose: str, *index: int) -> np.random.Generator:
    """Generator fully determined by ``seed``, ``purpose`` and ``index``.

    Streams with different keys are statistically independent, so episode
    ``k`` draws the same numbers whether episodes run serially, in parallel,
    or after a resume.
    """
    key = [int(seed) & 0xFFFFFFFFFFFFFFFF, _tag(purpose), *(int(i) for i in index)]
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(key)))
