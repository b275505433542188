"""Reference convolution engines with per-operation hooks.

Both engines route every primitive multiply and add through an
``ArithmeticHook`` and give each one a coordinate-derived ``OpSite``.  These
scalar engines are slow and exist to pin the semantics; the batched evaluator
in :mod:`wfault.batched` must agree with them bit for bit.

Winograd F(2x2, 3x3) is evaluated in integer-scaled form: the filter transform
yields ``4 * G g G^T`` (two extra fraction bits), so every stage is exact.
"""
from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Callable, NamedTuple

import numpy as np

from .fxp import DatapathSpec, FxpFormat, FxpTensor, requantize, wrap

MUL = "MUL"
ADD = "ADD"
G_FRAC_EXTRA = 2


class Engine(str, Enum):
    DIRECT = "DIRECT"
    WINOGRAD = "WINOGRAD"


class IneligibleSpecError(ValueError):
    pass


class ShapeMismatchError(ValueError):
    pass


@dataclass(frozen=True)
class ConvSpec:
    in_channels: int
    out_channels: int
    height: int
    width: int
    padding: int = 1
    kernel: int = 3
    stride: int = 1

    @property
    def out_h(self) -> int:
        return (self.height + 2 * self.padding - self.kernel) // self.stride + 1

    @property
    def out_w(self) -> int:
        return (self.width + 2 * self.padding - self.kernel) // self.stride + 1

    @property
    def winograd_eligible(self) -> bool:
        return self.kernel == 3 and self.stride == 1

    @property
    def tiles(self) -> tuple[int, int]:
        return (self.out_h + 1) // 2, (self.out_w + 1) // 2


@dataclass(frozen=True)
class Stage:
    name: str
    kind: str
    base: int
    count: int
    width: int

    def contains(self, site_index: int) -> bool:
        return self.base <= site_index < self.base + self.count


class OpSite(NamedTuple):
    layer_id: int
    op_kind: str
    site_index: int
    stage: Stage | None = None


ArithmeticHook = Callable[[OpSite, int], int]


def identity_hook(site: OpSite, value: int) -> int:
    return value


class CountingHook:
    """Identity hook that tallies invocations per (layer, kind) and per stage."""

    def __init__(self):
        self.counts: dict[tuple[int, str], int] = {}
        self.stage_counts: dict[tuple[int, str, str], int] = {}
        self.seen: set[tuple[int, str, int]] = set()

    def __call__(self, site: OpSite, value: int) -> int:
        key = (site.layer_id, site.op_kind)
        self.counts[key] = self.counts.get(key, 0) + 1
        sk = (site.layer_id, site.op_kind, site.stage.name if site.stage else "")
        self.stage_counts[sk] = self.stage_counts.get(sk, 0) + 1
        self.seen.add((site.layer_id, site.op_kind, site.site_index))
        return value


@dataclass(frozen=True)
class SiteLayout:
    """How one layer's MUL and ADD site spaces split into stages."""

    stages: tuple[Stage, ...]

    def kind_stages(self, kind: str) -> tuple[Stage, ...]:
        return tuple(s for s in self.stages if s.kind == kind)

    def stage(self, kind: str, name: str) -> Stage:
        for s in self.stages:
            if s.kind == kind and s.name == name:
                return s
        raise KeyError((kind, name))

    def stage_of(self, kind: str, site_index: int) -> Stage:
        for s in self.kind_stages(kind):
            if s.contains(site_index):
                return s
        raise IndexError(f"{kind} site {site_index} outside layout")

    def n_sites(self, kind: str) -> int:
        return sum(s.count for s in self.kind_stages(kind))


def _build(entries) -> SiteLayout:
    bases = {MUL: 0, ADD: 0}
    stages = []
    for name, kind, count, width in entries:
        stages.append(Stage(name, kind, bases[kind], count, width))
        bases[kind] += count
    return SiteLayout(tuple(stages))


def conv_layout(spec: ConvSpec, engine: Engine, word_bits: int = 16, dp: DatapathSpec | None = None) -> SiteLayout:
    dp = dp or DatapathSpec(2 * word_bits)
    F, C = spec.out_channels, spec.in_channels
    if engine == Engine.DIRECT:
        n_out = F * spec.out_h * spec.out_w
        K = C * spec.kernel * spec.kernel
        return _build([("mul", MUL, n_out * K, dp.mul_out_bits), ("accum", ADD, n_out * (K - 1), dp.acc_bits)])
    if not spec.winograd_eligible:
        raise IneligibleSpecError(f"winograd needs a 3x3 kernel with stride 1, got {spec}")
    T = spec.tiles[0] * spec.tiles[1]
    wide = dp.acc_bits + G_FRAC_EXTRA
    return _build([
        ("filter", MUL, F * C * 14, word_bits + 4),
        ("mul", MUL, F * C * T * 16, wide),
        ("filter", ADD, F * C * 28, word_bits + 4),
        ("input", ADD, C * T * 32, word_bits + 2),
        ("accum", ADD, F * T * 16 * (C - 1), wide),
        ("output", ADD, F * T * 24, wide),
    ])


def fc_layout(n_in: int, n_out: int, word_bits: int = 16, dp: DatapathSpec | None = None) -> SiteLayout:
    dp = dp or DatapathSpec(2 * word_bits)
    return _build([("mul", MUL, n_out * n_in, dp.mul_out_bits), ("accum", ADD, n_out * (n_in - 1), dp.acc_bits)])


class OpCounts(NamedTuple):
    n_mul: int
    n_add: int
    by_stage: dict

    @property
    def elementwise_mul(self) -> int:
        return self.by_stage.get((MUL, "mul"), 0)


def count_ops(spec: ConvSpec, engine: Engine | str) -> OpCounts:
    lay = conv_layout(spec, Engine(engine))
    return OpCounts(lay.n_sites(MUL), lay.n_sites(ADD), {(s.kind, s.name): s.count for s in lay.stages})


# ---------------------------------------------------------------------------
# transforms, written once against an ``ops`` object so the scalar hooked
# engine and the batched masked evaluator share the exact op order


class HookedOps:
    """Scalar ops that wrap to the stage width and pass through ``hook``."""

    def __init__(self, hook: ArithmeticHook, layer_id: int, add_stage: Stage | None, mul_stage: Stage | None,
                 add_offset: int = 0, mul_offset: int = 0):
        self.hook = hook
        self.layer_id = layer_id
        self.add_stage, self.mul_stage = add_stage, mul_stage
        self.add_next, self.mul_next = add_offset, mul_offset

    def _site(self, stage: Stage, local: int) -> OpSite:
        return OpSite(self.layer_id, stage.kind, stage.base + local, stage)

    def add(self, a, b):
        st = self.add_stage
        v = wrap(a + b, st.width)
        site = self._site(st, self.add_next)
        self.add_next += 1
        return self.hook(site, v)

    def sub(self, a, b):
        st = self.add_stage
        v = wrap(a - b, st.width)
        site = self._site(st, self.add_next)
        self.add_next += 1
        return self.hook(site, v)

    def half(self, v):
        # multiply by +-1/2: the raw word is kept, the fraction grows by one bit
        st = self.mul_stage
        v = wrap(v, st.width)
        site = self._site(st, self.mul_next)
        self.mul_next += 1
        return self.hook(site, v)


class PlainOps:
    """Fault-free ops on ints or numpy arrays (no wrapping needed: values are exact)."""

    def add(self, a, b):
        return a + b

    def sub(self, a, b):
        return a - b

    def half(self, v):
        return v


FILTER_OPS = (28, 14)  # (adds, muls) per filter slice
INPUT_OPS = 32
OUTPUT_OPS = 24


def filter_transform(g, ops) -> list:
    """Integer-scaled U = 4 * G g G^T for a 3x3 ``g`` (nested sequence)."""
    t = [[None] * 3 for _ in range(4)]
    for j in range(3):
        t[0][j] = 2 * g[0][j]
        t[1][j] = ops.half(ops.add(ops.add(g[0][j], g[1][j]), g[2][j]))
        t[2][j] = ops.half(ops.add(ops.sub(g[0][j], g[1][j]), g[2][j]))
        t[3][j] = 2 * g[2][j]
    u = [[None] * 4 for _ in range(4)]
    for r in range(4):
        u[r][0] = 2 * t[r][0]
        u[r][1] = ops.half(ops.add(ops.add(t[r][0], t[r][1]), t[r][2]))
        u[r][2] = ops.half(ops.add(ops.sub(t[r][0], t[r][1]), t[r][2]))
        u[r][3] = 2 * t[r][2]
    return u


def input_transform(d, ops) -> list:
    """V = B^T d B for a 4x4 tile ``d``; adds and subtractions only."""
    w = [[None] * 4 for _ in range(4)]
    for j in range(4):
        w[0][j] = ops.sub(d[0][j], d[2][j])
        w[1][j] = ops.add(d[1][j], d[2][j])
        w[2][j] = ops.sub(d[2][j], d[1][j])
        w[3][j] = ops.sub(d[1][j], d[3][j])
    v = [[None] * 4 for _ in range(4)]
    for r in range(4):
        v[r][0] = ops.sub(w[r][0], w[r][2])
        v[r][1] = ops.add(w[r][1], w[r][2])
        v[r][2] = ops.sub(w[r][2], w[r][1])
        v[r][3] = ops.sub(w[r][1], w[r][3])
    return v


def output_transform(m, ops) -> list:
    """Y = A^T M A for a 4x4 ``m``; returns 2x2."""
    z = [[None] * 4 for _ in range(2)]
    for j in range(4):
        z[0][j] = ops.add(ops.add(m[0][j], m[1][j]), m[2][j])
        z[1][j] = ops.sub(ops.sub(m[1][j], m[2][j]), m[3][j])
    y = [[None] * 2 for _ in range(2)]
    for r in range(2):
        y[r][0] = ops.add(ops.add(z[r][0], z[r][1]), z[r][2])
        y[r][1] = ops.sub(ops.sub(z[r][1], z[r][2]), z[r][3])
    return y


def winograd_filter_transform(g, hook: ArithmeticHook | None = None, *, layer_id: int = 0,
                              layout: SiteLayout | None = None, slice_index: int = 0) -> np.ndarray:
    g = np.asarray(g, dtype=np.int64).tolist()
    if hook is None:
        return np.array(filter_transform(g, PlainOps()), dtype=np.int64)
    n_add, n_mul = FILTER_OPS
    ops = HookedOps(hook, layer_id, layout.stage(ADD, "filter"), layout.stage(MUL, "filter"),
                    slice_index * n_add, slice_index * n_mul)
    return np.array(filter_transform(g, ops), dtype=np.int64)


def winograd_input_transform(d, hook: ArithmeticHook | None = None, *, layer_id: int = 0,
                             layout: SiteLayout | None = None, slice_index: int = 0) -> np.ndarray:
    d = np.asarray(d, dtype=np.int64).tolist()
    if hook is None:
        return np.array(input_transform(d, PlainOps()), dtype=np.int64)
    ops = HookedOps(hook, layer_id, layout.stage(ADD, "input"), None, slice_index * INPUT_OPS)
    return np.array(input_transform(d, ops), dtype=np.int64)


def winograd_output_transform(m, hook: ArithmeticHook | None = None, *, layer_id: int = 0,
                              layout: SiteLayout | None = None, slice_index: int = 0) -> np.ndarray:
    m = np.asarray(m, dtype=np.int64).tolist()
    if hook is None:
        return np.array(output_transform(m, PlainOps()), dtype=np.int64)
    ops = HookedOps(hook, layer_id, layout.stage(ADD, "output"), None, slice_index * OUTPUT_OPS)
    return np.array(output_transform(m, ops), dtype=np.int64)


def winograd_elementwise_accumulate(U, V, hook: ArithmeticHook | None = None, *, layer_id: int = 0,
                                    layout: SiteLayout | None = None, k: int = 0, b: int = 0,
                                    n_tiles: int = 1) -> np.ndarray:
    """M = sum_c U[c] * V[c] with channels accumulated in ascending order.

    ``U`` and ``V`` are (C, 4, 4).  Site indices follow ((k*C + c)*T + b)*16 + e
    for the products and ((k*T + b)*16 + e)*(C-1) + (c-1) for the adds.
    """
    U = np.asarray(U, dtype=np.int64)
    V = np.asarray(V, dtype=np.int64)
    C = U.shape[0]
    if hook is None:
        return (U * V).sum(axis=0)
    ms, acs = layout.stage(MUL, "mul"), layout.stage(ADD, "accum")
    M = np.zeros((4, 4), dtype=np.int64)
    for e in range(16):
        i, j = divmod(e, 4)
        acc = 0
        for c in range(C):
            p = wrap(int(U[c, i, j]) * int(V[c, i, j]), ms.width)
            p = hook(OpSite(layer_id, MUL, ms.base + ((k * C + c) * n_tiles + b) * 16 + e, ms), p)
            if c == 0:
                acc = p
            else:
                acc = wrap(acc + p, acs.width)
                acc = hook(OpSite(layer_id, ADD, acs.base + ((k * n_tiles + b) * 16 + e) * (C - 1) + c - 1, acs), acc)
        M[i, j] = acc
    return M


def _check_conv(inp: FxpTensor, weights: FxpTensor, spec: ConvSpec):
    if inp.shape != (spec.in_channels, spec.height, spec.width):
        raise ShapeMismatchError(f"input shape {inp.shape} does not match {spec}")
    if weights.shape != (spec.out_channels, spec.in_channels, spec.kernel, spec.kernel):
        raise ShapeMismatchError(f"weight shape {weights.shape} does not match {spec}")
    if inp.fmt != weights.fmt:
        raise ShapeMismatchError("input and weights must share a format")


def direct_conv(inp: FxpTensor, weights: FxpTensor, spec: ConvSpec, hook: ArithmeticHook = identity_hook,
                *, layer_id: int = 0, dp: DatapathSpec | None = None) -> FxpTensor:
    """Scalar direct convolution; channel-major, then row-major taps."""
    _check_conv(inp, weights, spec)
    fmt = inp.fmt
    dp = dp or DatapathSpec.for_format(fmt)
    lay = conv_layout(spec, Engine.DIRECT, fmt.word_bits, dp)
    ms, acs = lay.stage(MUL, "mul"), lay.stage(ADD, "accum")
    p, s, kk = spec.padding, spec.stride, spec.kernel
    x = np.pad(inp.data, ((0, 0), (p, p), (p, p))).tolist()
    w = weights.data.tolist()
    K = spec.in_channels * kk * kk
    Ho, Wo = spec.out_h, spec.out_w
    out = np.zeros((spec.out_channels, Ho, Wo), dtype=np.int64)
    for f in range(spec.out_channels):
        for y in range(Ho):
            for xo in range(Wo):
                o = (f * Ho + y) * Wo + xo
                acc = 0
                k = 0
                for c in range(spec.in_channels):
                    for i in range(kk):
                        for j in range(kk):
                            prod = wrap(w[f][c][i][j] * x[c][y * s + i][xo * s + j], ms.width)
                            prod = hook(OpSite(layer_id, MUL, ms.base + o * K + k, ms), prod)
                            if k == 0:
                                acc = prod
                            else:
                                acc = wrap(acc + prod, acs.width)
                                acc = hook(OpSite(layer_id, ADD, acs.base + o * (K - 1) + k - 1, acs), acc)
                            k += 1
                out[f, y, xo] = requantize(acc, 2 * fmt.frac_bits, fmt)
    return FxpTensor(out, fmt)


def winograd_conv(inp: FxpTensor, weights: FxpTensor, spec: ConvSpec, hook: ArithmeticHook = identity_hook,
                  *, layer_id: int = 0, dp: DatapathSpec | None = None) -> FxpTensor:
    """Scalar Winograd F(2x2, 3x3) convolution, tiles row-major."""
    if not spec.winograd_eligible:
        raise IneligibleSpecError(f"winograd needs a 3x3 kernel with stride 1, got {spec}")
    _check_conv(inp, weights, spec)
    fmt = inp.fmt
    dp = dp or DatapathSpec.for_format(fmt)
    lay = conv_layout(spec, Engine.WINOGRAD, fmt.word_bits, dp)
    F, C = spec.out_channels, spec.in_channels
    TY, TX = spec.tiles
    T = TY * TX
    p = spec.padding
    # zero-extend bottom/right so every tile is a full 4x4 window
    x = np.pad(inp.data, ((0, 0), (p, p + 2 * TY - spec.out_h), (p, p + 2 * TX - spec.out_w)))
    U = np.empty((F, C, 4, 4), dtype=np.int64)
    for k in range(F):
        for c in range(C):
            U[k, c] = winograd_filter_transform(weights.data[k, c], hook, layer_id=layer_id, layout=lay,
                                                slice_index=k * C + c)
    V = np.empty((C, T, 4, 4), dtype=np.int64)
    for c in range(C):
        for b in range(T):
            ty, tx = divmod(b, TX)
            V[c, b] = winograd_input_transform(x[c, 2 * ty:2 * ty + 4, 2 * tx:2 * tx + 4], hook, layer_id=layer_id,
                                               layout=lay, slice_index=c * T + b)
    out = np.zeros((F, 2 * TY, 2 * TX), dtype=np.int64)
    shift_frac = 2 * fmt.frac_bits + G_FRAC_EXTRA
    for k in range(F):
        for b in range(T):
            ty, tx = divmod(b, TX)
            M = winograd_elementwise_accumulate(U[k], V[:, b], hook, layer_id=layer_id, layout=lay, k=k, b=b,
                                                n_tiles=T)
            Y = winograd_output_transform(M, hook, layer_id=layer_id, layout=lay, slice_index=k * T + b)
            for r in range(2):
                for q in range(2):
                    out[k, 2 * ty + r, 2 * tx + q] = requantize(int(Y[r, q]), shift_frac, fmt)
    return FxpTensor(out[:, :spec.out_h, :spec.out_w], fmt)


def fc_forward(inp: FxpTensor, weights: FxpTensor, hook: ArithmeticHook = identity_hook, *, layer_id: int = 0,
               dp: DatapathSpec | None = None) -> FxpTensor:
    """Scalar fully-connected layer; weights are (n_out, n_in), inputs accumulated in index order."""
    fmt = inp.fmt
    dp = dp or DatapathSpec.for_format(fmt)
    n_out, n_in = weights.shape
    if inp.data.size != n_in:
        raise ShapeMismatchError(f"fc expects {n_in} inputs, got {inp.data.size}")
    lay = fc_layout(n_in, n_out, fmt.word_bits, dp)
    ms, acs = lay.stage(MUL, "mul"), lay.stage(ADD, "accum")
    x = inp.data.reshape(-1).tolist()
    w = weights.data.tolist()
    out = np.zeros(n_out, dtype=np.int64)
    for o in range(n_out):
        acc = 0
        for n in range(n_in):
            prod = hook(OpSite(layer_id, MUL, ms.base + o * n_in + n, ms), wrap(w[o][n] * x[n], ms.width))
            if n == 0:
                acc = prod
            else:
                acc = hook(OpSite(layer_id, ADD, acs.base + o * (n_in - 1) + n - 1, acs), wrap(acc + prod, acs.width))
        out[o] = requantize(acc, 2 * fmt.frac_bits, fmt)
    return FxpTensor(out, fmt)
