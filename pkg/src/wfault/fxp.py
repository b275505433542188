"""Two's-complement fixed-point formats and the primitive datapath arithmetic.

Every function here accepts Python ints or integer numpy arrays so the same
rules drive both the scalar reference engines and the batched evaluator.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class FxpFormat:
    word_bits: int
    frac_bits: int

    def __post_init__(self):
        if self.word_bits not in (8, 16):
            raise ValueError(f"word_bits must be 8 or 16, got {self.word_bits}")
        if not 0 <= self.frac_bits < self.word_bits:
            raise ValueError(f"frac_bits must lie in [0, {self.word_bits}), got {self.frac_bits}")

    @property
    def qmin(self) -> int:
        return -(1 << (self.word_bits - 1))

    @property
    def qmax(self) -> int:
        return (1 << (self.word_bits - 1)) - 1

    @property
    def one(self) -> int:
        """Raw encoding of 1.0 (may fall outside the range when frac_bits = word_bits - 1)."""
        return 1 << self.frac_bits


INT8 = FxpFormat(8, 5)
INT16 = FxpFormat(16, 10)


@dataclass(frozen=True)
class DatapathSpec:
    mul_out_bits: int
    acc_bits: int = 32
    wrap_on_overflow: bool = True

    def __post_init__(self):
        if self.mul_out_bits > self.acc_bits:
            raise ValueError("mul_out_bits must not exceed acc_bits")
        if self.acc_bits > 60:
            raise ValueError("acc_bits above 60 is not supported")

    @classmethod
    def for_format(cls, fmt: FxpFormat, acc_bits: int = 32) -> "DatapathSpec":
        return cls(mul_out_bits=2 * fmt.word_bits, acc_bits=acc_bits)


@dataclass
class ArithStats:
    """Mutable counters for silent saturation and accumulator wraparound."""

    saturations: int = 0
    overflows: int = 0


@dataclass
class FxpTensor:
    data: np.ndarray
    fmt: FxpFormat
    saturated: int = field(default=0, compare=False)

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.int64)
        if self.data.size and (self.data.min() < self.fmt.qmin or self.data.max() > self.fmt.qmax):
            raise ValueError("tensor data outside format range")

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(self.data.shape)

    def flat(self) -> np.ndarray:
        return self.data.reshape(-1)

    def dequantize(self) -> np.ndarray:
        return dequantize(self.data, self.fmt)

    def __eq__(self, other):
        if not isinstance(other, FxpTensor):
            return NotImplemented
        return self.fmt == other.fmt and self.shape == other.shape and bool(np.array_equal(self.data, other.data))


def wrap(x, bits: int):
    """Reduce to a signed two's-complement word of ``bits`` bits."""
    half = 1 << (bits - 1)
    mask = (1 << bits) - 1
    if isinstance(x, np.ndarray):
        return ((x + half) & mask) - half
    return ((int(x) + half) & mask) - half


def flip_word(x, mask, bits: int):
    """XOR ``mask`` into the low ``bits`` bits of signed ``x`` and re-sign the result."""
    full = (1 << bits) - 1
    if isinstance(x, np.ndarray) or isinstance(mask, np.ndarray):
        u = (np.asarray(x, dtype=np.int64) & full) ^ (np.asarray(mask, dtype=np.int64) & full)
        return np.where(u >= (1 << (bits - 1)), u - (1 << bits), u)
    u = (int(x) & full) ^ (int(mask) & full)
    return u - (1 << bits) if u >> (bits - 1) else u


def quantize(values, fmt: FxpFormat) -> FxpTensor:
    values = np.asarray(values, dtype=np.float64)
    if not np.all(np.isfinite(values)):
        raise ValueError("quantize expects finite values")
    raw = np.rint(values * float(1 << fmt.frac_bits))  # rint is round-half-even
    sat = int(np.count_nonzero((raw < fmt.qmin) | (raw > fmt.qmax)))
    raw = np.clip(raw, fmt.qmin, fmt.qmax).astype(np.int64)
    return FxpTensor(raw, fmt, saturated=sat)


def dequantize(raw, fmt: FxpFormat) -> np.ndarray:
    return np.asarray(raw, dtype=np.float64) * 2.0 ** (-fmt.frac_bits)


def fxp_mul(a, b, dp: DatapathSpec):
    # the product of two word-range operands always fits in 2*word_bits
    return wrap(a * b, dp.mul_out_bits)


def fxp_add(a, b, dp: DatapathSpec, stats: ArithStats | None = None):
    s = a + b
    out = wrap(s, dp.acc_bits)
    if stats is not None:
        stats.overflows += int(np.count_nonzero(np.asarray(out != s)))
    if not dp.wrap_on_overflow:
        lo, hi = -(1 << (dp.acc_bits - 1)), (1 << (dp.acc_bits - 1)) - 1
        return np.clip(s, lo, hi) if isinstance(s, np.ndarray) else min(max(s, lo), hi)
    return out


def requantize(v, in_frac: int, out: FxpFormat, stats: ArithStats | None = None):
    """Arithmetic shift with round-half-up, then saturate to ``out``."""
    shift = in_frac - out.frac_bits
    if shift < 0:
        raise ValueError("requantize cannot add fraction bits")
    if shift:
        v = (v + (1 << (shift - 1))) >> shift
    if isinstance(v, np.ndarray):
        if stats is not None:
            stats.saturations += int(np.count_nonzero((v < out.qmin) | (v > out.qmax)))
        return np.clip(v, out.qmin, out.qmax)
    if stats is not None and not out.qmin <= v <= out.qmax:
        stats.saturations += 1
    return min(max(int(v), out.qmin), out.qmax)
