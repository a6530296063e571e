"""Deterministic random-number substreams.

Every random quantity in the package is drawn from a generator derived from a
single user seed plus a structural path (e.g. ``("condsim", sample_index)``).
Substreams are independent of evaluation order and of how work is split across
processes, which is what makes ``--jobs N`` runs byte-identical.
"""

from __future__ import annotations

import hashlib

import numpy as np

__all__ = ["substream", "seed_sequence"]


def _key_to_int(key: int | str) -> int:
    if isinstance(key, (int, np.integer)):
        return int(key) & 0xFFFFFFFFFFFFFFFF
    digest = hashlib.blake2b(str(key).encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "big")


def seed_sequence(seed: int, *path: int | str) -> np.random.SeedSequence:
    """SeedSequence for a (seed, *path) address; stable across platforms."""
    entropy = [_key_to_int(seed)] + [_key_to_int(p) for p in path]
    return np.random.SeedSequence(entropy)


def substream(seed: int, *path: int | str) -> np.random.Generator:
    """Generator for a (seed, *path) address.

    The same address always yields the same stream, and distinct addresses
    yield statistically independent streams.
    """
    return np.random.default_rng(seed_sequence(seed, *path))
