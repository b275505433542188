from fractions import Fraction as Fr

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from wfault.conv import (ADD, FILTER_OPS, MUL, ConvSpec, CountingHook, Engine, IneligibleSpecError, ShapeMismatchError,
                         conv_layout, count_ops, direct_conv, fc_forward, winograd_conv,
                         winograd_elementwise_accumulate, winograd_filter_transform, winograd_input_transform,
                         winograd_output_transform)
from wfault.fxp import INT8, INT16, FxpTensor

# canonical F(2x2, 3x3) constants, as exact rationals
G = [[Fr(1), Fr(0), Fr(0)], [Fr(1, 2), Fr(1, 2), Fr(1, 2)], [Fr(1, 2), Fr(-1, 2), Fr(1, 2)], [Fr(0), Fr(0), Fr(1)]]
BT = [[1, 0, -1, 0], [0, 1, 1, 0], [0, -1, 1, 0], [0, 1, 0, -1]]
AT = [[1, 1, 1, 0], [0, 1, -1, -1]]


def mm(a, b):
    return [[sum(Fr(a[i][k]) * Fr(b[k][j]) for k in range(len(b))) for j in range(len(b[0]))] for i in range(len(a))]


def tr(a):
    return [list(r) for r in zip(*a)]


def oracle_U(g):
    return mm(mm(G, g), tr(G))


def oracle_V(d):
    return mm(mm(BT, d), tr(BT))


def oracle_Y(m):
    return mm(mm(AT, m), tr(AT))


def naive_direct(x, w, spec, frac):
    """Triple-loop oracle: exact integer accumulation, wrap at 32 bits, round-half-up shift, saturate."""
    C, H, W = x.shape
    p = spec.padding
    xp = np.pad(x, ((0, 0), (p, p), (p, p)))
    out = np.zeros((spec.out_channels, spec.out_h, spec.out_w), dtype=np.int64)
    for f in range(spec.out_channels):
        for y in range(spec.out_h):
            for xx in range(spec.out_w):
                acc = 0
                for c in range(C):
                    for i in range(3):
                        for j in range(3):
                            acc += int(w[f, c, i, j]) * int(xp[c, y + i, xx + j])
                acc = (acc + 2**31) % 2**32 - 2**31
                v = (acc + (1 << (frac - 1))) >> frac
                out[f, y, xx] = min(max(v, -(2**15)), 2**15 - 1)
    return out


def rand_layer(rng, C, F, H, W, fmt=INT16, scale=None):
    scale = scale or (1 << (fmt.word_bits - 1))
    x = rng.integers(-scale, scale, (C, H, W))
    w = rng.integers(-scale, scale, (F, C, 3, 3))
    return FxpTensor(x, fmt), FxpTensor(w, fmt), ConvSpec(C, F, H, W)


# ---------------------------------------------------------------------------
# transforms against the rational oracle


def test_filter_transform_zero_and_delta():
    assert not winograd_filter_transform(np.zeros((3, 3))).any()
    g = np.zeros((3, 3), dtype=np.int64)
    g[1, 1] = 1
    U = winograd_filter_transform(g)
    ref = oracle_U(g.tolist())
    assert all(U[i, j] == 4 * ref[i][j] for i in range(4) for j in range(4))
    assert {Fr(int(v), 4) for v in U.ravel()} <= {Fr(0), Fr(1, 4), Fr(-1, 4), Fr(1, 2), Fr(-1, 2)}


@settings(max_examples=100)
@given(st.lists(st.integers(-(2**15), 2**15 - 1), min_size=9, max_size=9))
def test_filter_transform_matches_rational_oracle(vals):
    g = np.array(vals).reshape(3, 3)
    U = winograd_filter_transform(g)
    ref = oracle_U(g.tolist())
    assert all(Fr(int(U[i, j]), 4) == ref[i][j] for i in range(4) for j in range(4))


def test_input_transform_zero_and_ones():
    assert not winograd_input_transform(np.zeros((4, 4))).any()
    V = winograd_input_transform(np.ones((4, 4), dtype=np.int64))
    ref = oracle_V([[1] * 4] * 4)
    assert V.tolist() == [[int(v) for v in r] for r in ref]


@settings(max_examples=100)
@given(st.lists(st.integers(-(2**15), 2**15 - 1), min_size=16, max_size=16))
def test_input_transform_matches_oracle(vals):
    d = np.array(vals).reshape(4, 4)
    assert winograd_input_transform(d).tolist() == [[int(v) for v in r] for r in oracle_V(d.tolist())]


def test_output_transform_zero_and_single_entry():
    assert not winograd_output_transform(np.zeros((4, 4))).any()
    for i in range(4):
        for j in range(4):
            m = np.zeros((4, 4), dtype=np.int64)
            m[i, j] = 7
            Y = winograd_output_transform(m)
            assert Y.tolist() == [[int(v) for v in r] for r in oracle_Y(m.tolist())]


@settings(max_examples=50)
@given(st.lists(st.integers(-(2**20), 2**20), min_size=16, max_size=16))
def test_output_transform_matches_oracle(vals):
    m = np.array(vals).reshape(4, 4)
    assert winograd_output_transform(m).tolist() == [[int(v) for v in r] for r in oracle_Y(m.tolist())]


def test_elementwise_single_channel_masks_v():
    rng = np.random.default_rng(0)
    U = (rng.random((1, 4, 4)) < 0.5).astype(np.int64)
    V = rng.integers(-100, 100, (1, 4, 4))
    assert np.array_equal(winograd_elementwise_accumulate(U, V), V[0] * U[0])


def test_elementwise_two_channels_sum():
    rng = np.random.default_rng(1)
    U = rng.integers(-50, 50, (2, 4, 4))
    V = rng.integers(-50, 50, (2, 4, 4))
    ref = [[sum(int(U[c, i, j]) * int(V[c, i, j]) for c in range(2)) for j in range(4)] for i in range(4)]
    assert winograd_elementwise_accumulate(U, V).tolist() == ref


def test_single_tile_pipeline_equals_rational_equation():
    rng = np.random.default_rng(2)
    d = rng.integers(-1000, 1000, (4, 4))
    g = rng.integers(-1000, 1000, (3, 3))
    Y = winograd_output_transform(winograd_elementwise_accumulate(winograd_filter_transform(g)[None],
                                                                  winograd_input_transform(d)[None]))
    ref = oracle_Y([[a * b for a, b in zip(ru, rv)] for ru, rv in zip(oracle_U(g.tolist()), oracle_V(d.tolist()))])
    assert all(Fr(int(Y[i, j]), 4) == ref[i][j] for i in range(2) for j in range(2))
    corr = [[sum(int(d[i + a, j + b]) * int(g[a, b]) for a in range(3) for b in range(3)) for j in range(2)]
            for i in range(2)]
    assert (Y // 4).tolist() == corr


# ---------------------------------------------------------------------------
# engines


def test_direct_zero_weights_and_delta_kernel():
    rng = np.random.default_rng(3)
    x, _, spec = rand_layer(rng, 2, 2, 5, 6)
    w0 = FxpTensor(np.zeros((2, 2, 3, 3)), INT16)
    assert not direct_conv(x, w0, spec).data.any()
    w = np.zeros((2, 2, 3, 3), dtype=np.int64)
    w[0, 0, 1, 1] = INT16.one
    w[1, 1, 1, 1] = INT16.one
    assert np.array_equal(direct_conv(x, FxpTensor(w, INT16), spec).data, x.data)


def test_direct_matches_naive_oracle():
    rng = np.random.default_rng(4)
    x, w, spec = rand_layer(rng, 1, 4, 8, 8)
    assert np.array_equal(direct_conv(x, w, spec).data, naive_direct(x.data, w.data, spec, INT16.frac_bits))


def test_direct_accepts_other_kernels_and_strides():
    rng = np.random.default_rng(5)
    spec = ConvSpec(1, 1, 6, 6, padding=0, kernel=5, stride=2)
    x = FxpTensor(rng.integers(-100, 100, (1, 6, 6)), INT16)
    w = FxpTensor(rng.integers(-100, 100, (1, 1, 5, 5)), INT16)
    assert direct_conv(x, w, spec).shape == (1, 1, 1)
    with pytest.raises(IneligibleSpecError):
        winograd_conv(x, w, spec)


def test_shape_mismatch():
    rng = np.random.default_rng(6)
    x, w, spec = rand_layer(rng, 2, 2, 4, 4)
    with pytest.raises(ShapeMismatchError):
        direct_conv(x, w, ConvSpec(3, 2, 4, 4))


def test_winograd_zero_input():
    rng = np.random.default_rng(7)
    _, w, spec = rand_layer(rng, 2, 3, 5, 5)
    assert not winograd_conv(FxpTensor(np.zeros((2, 5, 5)), INT16), w, spec).data.any()


@pytest.mark.parametrize("fmt", [INT8, INT16])
def test_winograd_equals_direct_random_layers(fmt):
    rng = np.random.default_rng(8 + fmt.word_bits)
    for _ in range(100):
        C, F = rng.integers(1, 4, 2)
        H, W = rng.integers(1, 8, 2)
        x, w, _ = rand_layer(rng, C, F, H, W, fmt)
        spec = ConvSpec(int(C), int(F), int(H), int(W), padding=int(rng.integers(0, 3)))
        if spec.out_h < 1 or spec.out_w < 1:
            continue
        assert np.array_equal(winograd_conv(x, w, spec).data, direct_conv(x, w, spec).data)


def test_engines_agree_under_heavy_wraparound():
    # full-scale int16 operands overflow the 32-bit accumulator; both engines must wrap identically
    rng = np.random.default_rng(9)
    x = FxpTensor(np.full((8, 4, 4), -(2**15)), INT16)
    w = FxpTensor(np.full((2, 8, 3, 3), -(2**15)), INT16)
    spec = ConvSpec(8, 2, 4, 4)
    assert np.array_equal(winograd_conv(x, w, spec).data, direct_conv(x, w, spec).data)
    x, w, spec = rand_layer(rng, 6, 2, 4, 4)
    assert np.array_equal(winograd_conv(x, w, spec).data, direct_conv(x, w, spec).data)


# ---------------------------------------------------------------------------
# op counting


def test_count_examples():
    spec = ConvSpec(1, 1, 4, 4)
    d = count_ops(spec, Engine.DIRECT)
    assert d.n_mul == 144
    assert count_ops(spec, Engine.WINOGRAD).elementwise_mul == 64


def test_mul_ratio_tile_aligned():
    for C, F, H in [(1, 1, 4), (3, 5, 8), (8, 16, 16)]:
        spec = ConvSpec(C, F, H, H)
        assert count_ops(spec, "WINOGRAD").elementwise_mul * 36 == count_ops(spec, "DIRECT").n_mul * 16


def test_winograd_adds_exceed_direct_for_single_channel_filter():
    spec = ConvSpec(1, 1, 4, 4)
    assert count_ops(spec, "WINOGRAD").n_add > count_ops(spec, "DIRECT").n_add


def test_counts_match_instrumented_runs():
    rng = np.random.default_rng(10)
    for _ in range(20):
        C, F = (int(v) for v in rng.integers(1, 4, 2))
        H, W = (int(v) for v in rng.integers(2, 7, 2))
        x, w, spec = rand_layer(rng, C, F, H, W)
        for eng, fn in ((Engine.DIRECT, direct_conv), (Engine.WINOGRAD, winograd_conv)):
            hook = CountingHook()
            fn(x, w, spec, hook, layer_id=3)
            oc = count_ops(spec, eng)
            assert hook.counts.get((3, MUL), 0) == oc.n_mul
            assert hook.counts.get((3, ADD), 0) == oc.n_add
            # every site visited exactly once and inside the layout
            assert len(hook.seen) == oc.n_mul + oc.n_add


def test_filter_half_ops_are_mul_sites():
    lay = conv_layout(ConvSpec(2, 3, 4, 4), Engine.WINOGRAD)
    assert lay.stage(MUL, "filter").count == 2 * 3 * FILTER_OPS[1]
    assert lay.stage(ADD, "filter").count == 2 * 3 * FILTER_OPS[0]


def test_fc_forward_matches_dot_product():
    rng = np.random.default_rng(11)
    x = FxpTensor(rng.integers(-1000, 1000, 12), INT16)
    w = FxpTensor(rng.integers(-1000, 1000, (5, 12)), INT16)
    out = fc_forward(x, w)
    acc = w.data @ x.data
    ref = np.clip((acc + (1 << 9)) >> 10, -(2**15), 2**15 - 1)
    assert np.array_equal(out.data, ref)
