"""Seed derivation.

All randomness descends from one integer master seed. A substream is addressed by
a path of labels, e.g. ``substream(seed, "geometry", size_index, graph_index)``;
string labels are hashed to 32-bit words so paths stay stable across runs.
"""
from __future__ import annotations

import zlib

import numpy as np


def _word(label) -> int:
    if isinstance(label, str):
        return zlib.crc32(label.encode())
    label = int(label)
    if label < 0:
        raise ValueError("substream labels must be non-negative")
    return label


def derive_seed(seed: int, *path) -> int:
    """A 63-bit integer seed for the substream at ``path``."""
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(_word(p) for p in path))
    return int(ss.generate_state(1, dtype=np.uint64)[0]) >> 1


def substream(seed: int, *path) -> np.random.Generator:
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(_word(p) for p in path))
    return np.random.Generator(np.random.PCG64(ss))
