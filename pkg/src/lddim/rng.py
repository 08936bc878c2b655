"""Seeded random streams.

Every consumer derives its own counter-based (Philox) generator from the
master seed plus a stream label, so stages can be rerun independently and
still reproduce bit for bit.
"""

from __future__ import annotations

import zlib

import numpy as np

STREAMS = {"generate": 1, "split": 2, "init": 3, "train-vae": 4, "train-diffusion": 5,
           "invert": 6, "sample": 7, "sweep": 8, "extractor": 9, "observe": 10}


def _label(part) -> int:
    if isinstance(part, str):
        return STREAMS.get(part, zlib.crc32(part.encode()))
    return int(part)


def stream(seed: int, *parts) -> np.random.Generator:
    entropy = [int(seed) & (2**64 - 1)] + [_label(p) for p in parts]
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))


def child_seed(seed: int, *parts) -> int:
    entropy = [int(seed) & (2**64 - 1)] + [_label(p) for p in parts]
    return int(np.random.SeedSequence(entropy).generate_state(1, dtype=np.uint64)[0])
