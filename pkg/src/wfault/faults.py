"""Operation-level and neuron-level bit-flip injection.

A fault universe is fixed by a :class:`FaultConfig`.  For each
(trial, layer, op kind, stage, replica) block the set of flipped bits is drawn
from a keyed counter-based stream, so the corruption of any one op result is a
pure function of the configuration and the op's site index.  Scope masks only
filter that universe: an exempted layer leaves every other layer's faults
untouched, which is what makes paired comparisons tight.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from enum import Enum
from functools import lru_cache
from typing import Iterable

import numpy as np
from scipy import stats

from .conv import ADD, MUL, OpSite, Stage
from .fxp import FxpTensor, flip_word
from .rng import RngStream, combine, derive_key, mix64, to_unit

FAST_PATH_THRESHOLD = 2.0**-16


class FaultMode(str, Enum):
    NONE = "NONE"
    OP_LEVEL = "OP_LEVEL"
    NEURON_LEVEL = "NEURON_LEVEL"


@dataclass(frozen=True)
class ProtectionSet:
    """Protected fraction per (layer_id, op_kind); membership is a stateless hash test."""

    fractions: tuple[tuple[tuple[int, str], float], ...] = ()
    selection_seed: int = 0

    @classmethod
    def from_dict(cls, fractions: dict, selection_seed: int = 0) -> "ProtectionSet":
        items = tuple(sorted(((int(k[0]), str(k[1])), float(v)) for k, v in fractions.items() if v > 0))
        for _, v in items:
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"protected fraction {v} outside [0, 1]")
        return cls(items, selection_seed)

    def fraction(self, layer_id: int, kind: str) -> float:
        for k, v in self.fractions:
            if k == (layer_id, kind):
                return v
        return 0.0

    def membership(self, layer_id: int, kind: str, site_index) -> np.ndarray:
        p = self.fraction(layer_id, kind)
        sites = np.asarray(site_index, dtype=np.uint64)
        if p <= 0.0:
            return np.zeros(sites.shape, dtype=bool)
        if p >= 1.0:
            return np.ones(sites.shape, dtype=bool)
        h = combine(mix64(np.uint64(self.selection_seed & (2**64 - 1))), np.uint64(_kind_code(layer_id, kind)))
        return to_unit(combine(h, sites)) < p

    def is_protected(self, site: OpSite) -> bool:
        return bool(self.membership(site.layer_id, site.op_kind, site.site_index))


def _kind_code(layer_id: int, kind: str) -> int:
    return derive_key("protect", layer_id, kind)


@dataclass(frozen=True)
class FaultConfig:
    mode: FaultMode = FaultMode.NONE
    ber: float = 0.0
    seed: int = 0
    trial_id: int = 0
    layer_scope: frozenset | None = None  # None means every layer
    op_kind_scope: frozenset = frozenset({MUL, ADD})
    stage_scope: frozenset | None = None  # None means every stage
    excluded_layer: int | None = None
    protection: ProtectionSet = field(default_factory=ProtectionSet)

    def __post_init__(self):
        if not 0.0 <= self.ber <= 1.0:
            raise ValueError(f"ber {self.ber} outside [0, 1]")
        object.__setattr__(self, "mode", FaultMode(self.mode))
        object.__setattr__(self, "op_kind_scope", frozenset(self.op_kind_scope))
        if self.layer_scope is not None:
            object.__setattr__(self, "layer_scope", frozenset(self.layer_scope))
        if self.stage_scope is not None:
            object.__setattr__(self, "stage_scope", frozenset(self.stage_scope))

    def layer_active(self, layer_id: int) -> bool:
        if self.ber == 0.0 or layer_id == self.excluded_layer:
            return False
        return self.layer_scope is None or layer_id in self.layer_scope

    def stage_active(self, layer_id: int, stage: Stage) -> bool:
        if self.mode != FaultMode.OP_LEVEL or not self.layer_active(layer_id):
            return False
        if stage.kind not in self.op_kind_scope:
            return False
        return self.stage_scope is None or stage.name in self.stage_scope

    def for_trial(self, trial_id: int) -> "FaultConfig":
        return replace(self, trial_id=trial_id)


# ---------------------------------------------------------------------------
# primitive flips


def tmr_vote(a, b, c):
    """Bitwise majority of three words."""
    return (a & b) | (a & c) | (b & c)


def flip_bits(value: int, width: int, ber: float, rng: RngStream, fast_path: bool | None = None) -> int:
    """Flip each of the low ``width`` bits of ``value`` independently with probability ``ber``.

    Below ``FAST_PATH_THRESHOLD`` expected flips the flip positions are found by
    geometric skipping instead of one Bernoulli draw per bit.
    """
    if width > 64:
        raise ValueError("width must be <= 64")
    if ber <= 0.0:
        return value
    if fast_path is None:
        fast_path = ber * width < FAST_PATH_THRESHOLD
    mask = 0
    if fast_path:
        pos = int(rng.geometric(ber)) - 1
        while pos < width:
            mask |= 1 << pos
            pos += int(rng.geometric(ber))
    else:
        hits = np.flatnonzero(rng.random(width) < ber)
        for pos in hits:
            mask |= 1 << int(pos)
    return flip_word(value, mask, width) if mask else value


@lru_cache(maxsize=4096)
def _zero_prob(n_bits: int, ber: float) -> float:
    return float(np.exp(n_bits * np.log1p(-ber))) if ber < 1.0 else 0.0


def sample_block(key: tuple, n_sites: int, width: int, ber: float) -> tuple[np.ndarray, np.ndarray]:
    """Draw the flipped bits of ``n_sites`` words of ``width`` bits at per-bit rate ``ber``.

    Returns sorted unique site offsets and their XOR masks.  The flip count is
    drawn by inverse-CDF from a hash of ``key`` (so fault-free blocks cost one
    hash), and positions are a uniform sample without replacement, which is the
    exact conditional law of independent per-bit Bernoulli flips.
    """
    empty = (np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64))
    n_bits = n_sites * width
    if ber <= 0.0 or n_bits == 0:
        return empty
    u = (derive_key("count", *key) >> 11) * 2.0**-53  # same mapping as to_unit
    n_flips = block_flip_count(u, n_bits, ber)
    if n_flips == 0:
        return empty
    rng = RngStream("pos", *key)
    pos = np.sort(rng.choice(n_bits, n_flips)) if n_flips < n_bits else np.arange(n_bits)
    return _fold(pos, width)


def block_flip_count(u: float, n_bits: int, ber: float) -> int:
    if ber >= 1.0:
        return n_bits
    if u < _zero_prob(n_bits, ber):
        return 0
    return int(stats.binom.ppf(u, n_bits, ber))


def _fold(pos: np.ndarray, width: int):
    sites = pos // width
    bits = np.left_shift(np.int64(1), (pos % width).astype(np.int64))
    uniq, start = np.unique(sites, return_index=True)
    masks = np.bitwise_or.reduceat(bits, start) if len(uniq) else bits
    return uniq.astype(np.int64), masks.astype(np.int64)


def _block_key(cfg: FaultConfig, layer_id: int, stage: Stage, replica: int) -> tuple:
    return (cfg.seed, cfg.trial_id, layer_id, stage.kind, stage.name, replica)


@lru_cache(maxsize=4096)
def stage_masks(cfg: FaultConfig, layer_id: int, stage: Stage) -> tuple[np.ndarray, np.ndarray, int]:
    """Effective XOR masks for one stage after scope and TMR voting.

    Returns (global site indices, masks, protected-site count among faulted sites).
    """
    empty = np.zeros(0, dtype=np.int64)
    if not cfg.stage_active(layer_id, stage):
        return empty, empty, 0
    s0, m0 = sample_block(_block_key(cfg, layer_id, stage, 0), stage.count, stage.width, cfg.ber)
    p = cfg.protection.fraction(layer_id, stage.kind)
    if p <= 0.0:
        return s0 + stage.base, m0, 0
    s1, m1 = sample_block(_block_key(cfg, layer_id, stage, 1), stage.count, stage.width, cfg.ber)
    s2, m2 = sample_block(_block_key(cfg, layer_id, stage, 2), stage.count, stage.width, cfg.ber)
    if not (len(s0) or len(s1) or len(s2)):
        return empty, empty, 0
    sites = np.union1d(np.union1d(s0, s1), s2)
    a, b, c = (_lookup(sites, s, m) for s, m in ((s0, m0), (s1, m1), (s2, m2)))
    prot = cfg.protection.membership(layer_id, stage.kind, sites + stage.base)
    eff = np.where(prot, tmr_vote(a, b, c), a)
    keep = eff != 0
    return sites[keep] + stage.base, eff[keep], int(np.count_nonzero(prot))


def _lookup(sites, s, m):
    out = np.zeros(len(sites), dtype=np.int64)
    if len(s):
        idx = np.searchsorted(s, sites)
        idx = np.minimum(idx, len(s) - 1)
        hit = s[idx] == sites
        out[hit] = m[idx[hit]]
    return out


def replica_mask(cfg: FaultConfig, site: OpSite, replica: int) -> int:
    st = site.stage
    s, m = sample_block(_block_key(cfg, site.layer_id, st, replica), st.count, st.width, cfg.ber)
    return int(_lookup(np.array([site.site_index - st.base]), s, m)[0])


def inject_op(site: OpSite, value: int, cfg: FaultConfig) -> int:
    """Corrupt one primitive op result per ``cfg``; protected sites vote over three replicas."""
    st = site.stage
    if st is None or not cfg.stage_active(site.layer_id, st):
        return value
    if cfg.protection.is_protected(site):
        reps = [flip_word(value, replica_mask(cfg, site, r), st.width) for r in range(3)]
        return int(tmr_vote(*reps))
    return flip_word(value, replica_mask(cfg, site, 0), st.width)


@dataclass
class InjectionStats:
    ops: int = 0
    flips: int = 0
    corrupted: int = 0
    protected: int = 0
    saturations: int = 0

    def merge(self, other: "InjectionStats") -> "InjectionStats":
        return InjectionStats(self.ops + other.ops, self.flips + other.flips, self.corrupted + other.corrupted,
                              self.protected + other.protected, self.saturations + other.saturations)


class FaultHook:
    """ArithmeticHook applying :func:`inject_op` and recording :class:`InjectionStats`."""

    def __init__(self, cfg: FaultConfig):
        self.cfg = cfg
        self.stats = InjectionStats()

    def __call__(self, site: OpSite, value: int) -> int:
        self.stats.ops += 1
        if site.stage is not None and self.cfg.stage_active(site.layer_id, site.stage) \
                and self.cfg.protection.is_protected(site):
            self.stats.protected += 1
        out = inject_op(site, value, self.cfg)
        if out != value:
            self.stats.corrupted += 1
            self.stats.flips += bin((out ^ value) & ((1 << site.stage.width) - 1)).count("1")
        return out


def injection_stats(hook: FaultHook) -> InjectionStats:
    return hook.stats


def neuron_masks(cfg: FaultConfig, layer_id: int, n: int, width: int, tag: str = "") -> tuple[np.ndarray, np.ndarray]:
    if cfg.mode != FaultMode.NEURON_LEVEL or not cfg.layer_active(layer_id):
        return np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64)
    return sample_block((cfg.seed, cfg.trial_id, layer_id, "NEURON", tag, 0), n, width, cfg.ber)


def inject_neurons(t: FxpTensor, cfg: FaultConfig, layer_id: int = 0, tag: str = "") -> FxpTensor:
    """Flip bits of a finished activation tensor; sites are (layer, flat index)."""
    if cfg.mode != FaultMode.NEURON_LEVEL:
        raise ValueError("inject_neurons needs NEURON_LEVEL mode")
    sites, masks = neuron_masks(cfg, layer_id, t.data.size, t.fmt.word_bits, tag)
    if not len(sites):
        return FxpTensor(t.data.copy(), t.fmt)
    flat = t.data.reshape(-1).copy()
    flat[sites] = flip_word(flat[sites], masks, t.fmt.word_bits)
    return FxpTensor(flat.reshape(t.shape), t.fmt)


def protected_count(protection: ProtectionSet, layer_id: int, stages: Iterable[Stage]) -> int:
    """Number of protected sites across ``stages`` (exact membership count)."""
    total = 0
    for st in stages:
        total += int(np.count_nonzero(protection.membership(layer_id, st.kind, np.arange(st.base, st.base + st.count))))
    return total
