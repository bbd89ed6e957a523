"""Seed splitting.

A run is driven by one integer seed. Every stochastic subsystem draws from its
own stream, keyed by a tag and optional integer keys, so adding a consumer never
shifts another consumer's draws.
"""

from __future__ import annotations

import hashlib

import numpy as np


def _tag_hash(seed: int, tag: str) -> int:
    digest = hashlib.blake2b(f"{int(seed)}:{tag}".encode(), digest_size=8).digest()
    return int.from_bytes(digest, "little")


def derive_rng(seed: int, tag: str, *keys: int) -> np.random.Generator:
    """Return a generator for the stream ``(seed, tag, *keys)``."""
    entropy = [_tag_hash(seed, tag)] + [int(k) & 0xFFFFFFFFFFFFFFFF for k in keys]
    return np.random.default_rng(np.random.SeedSequence(entropy))


def as_rng(rng) -> np.random.Generator:
    if isinstance(rng, np.random.Generator):
        return rng
    return np.random.default_rng(rng)
