"""Counter-based seed splitting.

Every random stream is addressed by a root seed plus a path of labels, e.g.
``derive_rng(seed, "utt", 17, "noise")``. Streams never share state, so any
utterance, batch or crop can be regenerated in isolation.
"""
from __future__ import annotations

import zlib

import numpy as np


def _key(label) -> int:
    if isinstance(label, (int, np.integer)):
        if label < 0:
            raise ValueError(f"seed path labels must be non-negative, got {label}")
        return int(label)
    return zlib.crc32(str(label).encode("utf-8"))


def seed_sequence(seed: int, *path) -> np.random.SeedSequence:
    return np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(_key(p) for p in path))


def derive_rng(seed: int, *path) -> np.random.Generator:
    return np.random.default_rng(seed_sequence(seed, *path))


def derive_seed(seed: int, *path) -> int:
    """A 31-bit integer seed for the stream at ``path``."""
    return int(seed_sequence(seed, *path).generate_state(1)[0] >> 1)
