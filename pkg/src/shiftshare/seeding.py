"""Derivation of named random streams from a single run seed."""

from __future__ import annotations

import zlib

import numpy as np

__all__ = ["derive_rng", "derive_seed_sequence"]


def _key_to_int(key: str | int) -> int:
    if isinstance(key, (int, np.integer)):
        return int(key)
    return zlib.crc32(str(key).encode("utf-8"))


def derive_seed_sequence(seed: int, *keys: str | int) -> np.random.SeedSequence:
    """Build a seed sequence for the stream named by ``keys``.

    Stage names hash through crc32 so the derivation is stable across
    processes and sessions; integer keys (replication indices) pass
    through unchanged.
    """
    entropy = [int(seed)] + [_key_to_int(k) for k in keys]
    return np.random.SeedSequence(entropy)


def derive_rng(seed: int, *keys: str | int) -> np.random.Generator:
    """Independent generator for the stream named by ``keys``."""
    return np.random.default_rng(derive_seed_sequence(seed, *keys))
