"""Counter-based random streams.

Every frame draws from its own Philox stream, addressed by a 128-bit key and
the frame index placed in the second counter word. Any frame can therefore be
regenerated in isolation and results never depend on execution order.
"""

from __future__ import annotations

import hashlib
import struct

import numpy as np

MASK64 = (1 << 64) - 1


def _digest(*parts) -> int:
    h = hashlib.blake2b(digest_size=16)
    for p in parts:
        if isinstance(p, float):
            h.update(struct.pack("<d", p))
        elif isinstance(p, int):
            h.update((p & ((1 << 128) - 1)).to_bytes(16, "little"))
        else:
            h.update(str(p).encode())
        h.update(b"\x1f")
    return int.from_bytes(h.digest(), "little")


def cell_seed(base_seed: int, frequency_hz: float, transmittance: float) -> int:
    """64-bit seed of one sweep cell, independent of the grid it sits in."""
    return _digest("cell", int(base_seed), float(frequency_hz), float(transmittance)) & MASK64


def stream_key(seed: int, purpose: str) -> int:
    return _digest("stream", int(seed), purpose)


def frame_generator(key: int, frame: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=key, counter=[0, int(frame), 0, 0]))


def generator(seed: int, purpose: str = "main") -> np.random.Generator:
    return frame_generator(stream_key(seed, purpose), 0)
