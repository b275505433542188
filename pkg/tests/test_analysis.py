import pytest

from wfault.analysis import (SweepSpec, ber_sweep, choose_analysis_ber, ci_ge, ci_separated_gt, layer_vulnerability,
                             monotone_non_increasing, op_type_vulnerability, overlap)
from wfault.conv import ADD, MUL, Engine
from wfault.faults import FaultConfig, FaultMode
from wfault.network import (AccuracyResult, evaluate_accuracy, generate_synthetic_model, self_label, synthetic_inputs,
                            wilson)

BER = 1e-5


@pytest.fixture(scope="module")
def small():
    m = generate_synthetic_model(3, "small")
    return m, self_label(m, synthetic_inputs(4, 80, m.input_shape, m.fmt))


def acc(k, n):
    lo, hi = wilson(k, n)
    return AccuracyResult(k / n, k, n, lo, hi, 1)


def test_ci_comparisons():
    a, b = acc(90, 100), acc(40, 100)
    assert ci_separated_gt(a, b) and not overlap(a, b) and ci_ge(a, b) and not ci_ge(b, a)
    c = acc(86, 100)
    assert overlap(a, c) and ci_ge(c, a) and not ci_separated_gt(a, c)


def test_sweep_shape_and_zero_point(small):
    m, ds = small
    spec = SweepSpec(bers=(0.0, 1e-4, 1e-2), trials=2, seed=1)
    sw = ber_sweep(m, ds, spec)
    for eng in (Engine.DIRECT, Engine.WINOGRAD):
        s = sw.series(eng, FaultMode.OP_LEVEL)
        assert [b for b, _ in s] == [0.0, 1e-4, 1e-2]
        assert s[0][1].accuracy == 1.0
        assert monotone_non_increasing(s)
    assert len(sw.measurements()) == 6
    assert all(isinstance(d, float) for _, d in sw.improvement(FaultMode.OP_LEVEL))


def test_sweep_spec_validation():
    with pytest.raises(ValueError):
        SweepSpec(bers=())
    with pytest.raises(ValueError):
        SweepSpec(bers=(1e-3, 1e-4))


def test_monotone_detects_separated_rise():
    assert not monotone_non_increasing([(1e-5, acc(20, 200)), (1e-4, acc(150, 200))])
    assert monotone_non_increasing([(1e-5, acc(100, 200)), (1e-4, acc(104, 200))])


def test_choose_analysis_ber():
    series = [(1e-6, acc(95, 100)), (1e-5, acc(75, 100)), (1e-4, acc(25, 100)), (1e-3, acc(10, 100))]
    assert choose_analysis_ber(series) == 1e-5  # exact tie goes to the smaller ber
    assert choose_analysis_ber(series, target=0.3) == 1e-4
    assert choose_analysis_ber(series, target=0.1) == 1e-3


def test_vf_with_single_layer_scope_and_exempt_all(small):
    m, ds = small
    rep = layer_vulnerability(m, ds, BER, Engine.DIRECT, trials=2, seed=5)
    base = evaluate_accuracy(m, ds, FaultConfig(FaultMode.OP_LEVEL, BER, seed=5), 2)
    assert rep.baseline == base
    assert rep.layers == m.weighted_layers
    # exempting a layer only removes faults: a pure fault-free run is the ceiling
    for l in rep.layers:
        assert rep.exempted[l].accuracy <= 1.0
        assert rep.vf(l) >= -rep.vf_ci(l)
    # with faults confined to one layer, exempting that layer restores the fault-free result
    l0 = m.weighted_layers[0]
    only = FaultConfig(FaultMode.OP_LEVEL, BER, seed=5, layer_scope={l0}, excluded_layer=l0)
    assert evaluate_accuracy(m, ds, only, 2).accuracy == 1.0
    # baseline can be reused
    rep2 = layer_vulnerability(m, ds, BER, Engine.DIRECT, trials=2, seed=5, baseline=base)
    assert {l: rep2.vf(l) for l in rep2.layers} == {l: rep.vf(l) for l in rep.layers}
    assert all(rep.n_mul[l] > 0 and rep.n_add[l] > 0 for l in rep.layers)
    with pytest.raises(ValueError):
        layer_vulnerability(m, ds, 0.0, Engine.DIRECT)


def test_empty_scope_is_fault_free(small):
    m, ds = small
    cfg = FaultConfig(FaultMode.OP_LEVEL, 0.05, seed=1, op_kind_scope=frozenset())
    assert evaluate_accuracy(m, ds, cfg, 2).accuracy == 1.0


def test_op_type_structure(small):
    m, ds = small
    for eng in (Engine.DIRECT, Engine.WINOGRAD):
        r = op_type_vulnerability(m, ds, BER, eng, trials=2, seed=2)
        assert r.mul_free.total == r.add_free.total == r.baseline.total == 2 * len(ds)
        assert r.mul_sensitivity == pytest.approx(r.mul_free.accuracy - r.baseline.accuracy)
        assert [x.target for x in r.measurements()] == ["baseline", "mul_fault_free", "add_fault_free"]
    both = FaultConfig(FaultMode.OP_LEVEL, BER, seed=2, op_kind_scope=frozenset({MUL, ADD}))
    assert evaluate_accuracy(m, ds, both, 2) == evaluate_accuracy(m, ds, FaultConfig(FaultMode.OP_LEVEL, BER, seed=2), 2)
