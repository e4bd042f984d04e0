"""Seeded random streams.

Every run derives its streams from one root seed. Each stream is an
independent numpy ``Generator`` over the Philox-4x64 counter-based bit
generator. The 128-bit key holds the root seed in its low 64 bits and the
stream's fixed offset (plus a copy index) in its high 64 bits, so streams
of different seeds never collide. Philox advances its 256-bit
counter by one per 4 x 64-bit output block, so a stream's output depends
only on its key and how many values have been drawn from it.
"""

from __future__ import annotations

import numpy as np

STREAM_OFFSETS = {
    "data": 1,
    "init": 2,
    "noise": 3,
    "eval": 4,
    "sample": 5,
}

_U64 = (1 << 64) - 1


def make_stream(root_seed: int, name: str, index: int = 0) -> np.random.Generator:
    """Return the generator for stream ``name`` of ``root_seed``.

    ``index`` separates parallel copies of the same stream (ensemble
    trainers, for instance); index 0 is the canonical stream.
    """
    if name not in STREAM_OFFSETS:
        raise KeyError(f"unknown stream {name!r}")
    if index < 0:
        raise ValueError("stream index must be nonnegative")
    high = (STREAM_OFFSETS[name] + (int(index) << 8)) & _U64
    key = (high << 64) | (int(root_seed) & _U64)
    return np.random.Generator(np.random.Philox(key=key))
