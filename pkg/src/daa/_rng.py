"""Seed derivation so every random consumer gets its own reproducible stream."""

from __future__ import annotations

import zlib

import numpy as np


def _tag_word(tag: int | str) -> int:
    if isinstance(tag, str):
        return zlib.crc32(tag.encode("utf-8"))
    if tag < 0:
        raise ValueError("integer seed tags must be non-negative")
    return int(tag)


def derive_rng(seed: int, *tags: int | str) -> np.random.Generator:
    """Return a generator keyed on ``(seed, *tags)``.

    The same key always yields the same stream, independent of how many other
    streams were drawn before it, which is what makes block-parallel work
    schedule independent.
    """
    words = [_tag_word(seed)] + [_tag_word(t) for t in tags]
    return np.random.default_rng(np.random.SeedSequence(words))


def derive_seed(seed: int, *tags: int | str) -> int:
    """Integer child seed for APIs that take a plain seed."""
    return int(derive_rng(seed, *tags).integers(0, 2**31 - 1))
