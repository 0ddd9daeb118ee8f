"""Splittable seeding: every random stream derives from one integer seed."""
from __future__ import annotations

import zlib

import numpy as np


def stream_key(label: str | int) -> int:
    if isinstance(label, int):
        return label
    return zlib.crc32(label.encode("utf-8"))


def derive_rng(seed: int, *labels: str | int) -> np.random.Generator:
    """Generator for the stream ``(seed, *labels)``; labels are hashed with CRC32."""
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(stream_key(x) for x in labels))
    return np.random.Generator(np.random.PCG64(ss))
