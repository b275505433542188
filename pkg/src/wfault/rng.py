"""Counter-based, keyed random streams.

Every random decision in a fault campaign is a pure function of a key tuple
(seed, trial, layer, op kind, stage, replica, ...).  Keys are hashed with
BLAKE2b into a Philox key, so two streams with the same key produce the same
bits regardless of which process or in which order they are drawn.

``mix64`` is a SplitMix64 finaliser usable on numpy uint64 arrays; it drives the
cheap per-site decisions (protection membership, zero-fault screening).
"""
from __future__ import annotations

import hashlib
import struct
from functools import lru_cache

import numpy as np

_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MASK64 = (1 << 64) - 1


@lru_cache(maxsize=1 << 16, typed=True)
def _encode(part) -> bytes:
    if isinstance(part, bool):
        return b"b" + bytes([part])
    if isinstance(part, (int, np.integer)):
        return b"i" + (int(part) & _MASK64).to_bytes(8, "little") + (int(part) >> 64 & 0xFF).to_bytes(1, "little")
    if isinstance(part, float):
        return b"f" + struct.pack("<d", part)
    if isinstance(part, str):
        raw = part.encode()
        return b"s" + len(raw).to_bytes(2, "little") + raw
    raise TypeError(f"unsupported key part {part!r}")


def derive_key(*parts, bits: int = 64) -> int:
    """Hash an ordered tuple of ints/strings/floats to an unsigned integer."""
    h = hashlib.blake2b(digest_size=bits // 8, person=b"wfault-key")
    for p in parts:
        h.update(_encode(p))
    return int.from_bytes(h.digest(), "little")


def mix64(x):
    """SplitMix64 finaliser; vectorised over uint64 arrays, wraps silently."""
    with np.errstate(over="ignore"):
        z = np.asarray(x, dtype=np.uint64) + _GOLDEN
        z = (z ^ (z >> np.uint64(30))) * _M1
        z = (z ^ (z >> np.uint64(27))) * _M2
        return z ^ (z >> np.uint64(31))


def combine(h, x):
    """Fold ``x`` into running hash ``h`` (both uint64 arrays or scalars)."""
    return mix64(np.asarray(h, dtype=np.uint64) ^ mix64(x))


def to_unit(h) -> np.ndarray:
    """Map uint64 hashes to floats in [0, 1) using the top 53 bits."""
    return (np.asarray(h, dtype=np.uint64) >> np.uint64(11)).astype(np.float64) * 2.0**-53


class RngStream:
    """A Philox generator whose whole state is fixed by ``key``."""

    def __init__(self, *key):
        self.key = key
        k = derive_key(*key, bits=128)
        self.gen = np.random.Generator(np.random.Philox(key=np.array([k & _MASK64, k >> 64], dtype=np.uint64)))

    def random(self, size=None):
        return self.gen.random(size)

    def geometric(self, p, size=None):
        return self.gen.geometric(p, size)

    def integers(self, low, high=None, size=None):
        return self.gen.integers(low, high, size)

    def choice(self, n, size, replace=False):
        return self.gen.choice(n, size=size, replace=replace)
