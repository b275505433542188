import math

import pytest

from wfault.conv import Engine
from wfault.energy import (DEFAULT_ANCHORS, InfeasibleBudgetError, PowerModel, RuntimeModel, VoltageBerCurve,
                           VoltageRangeError, choose_voltage, energy_report, min_safe_voltage, scan_voltages,
                           voltage_grid)
from wfault.network import generate_synthetic_model, self_label, synthetic_inputs
from wfault.tmr import TmrMode


@pytest.fixture(scope="module")
def small():
    m = generate_synthetic_model(3, "small")
    return m, self_label(m, synthetic_inputs(4, 60, m.input_shape, m.fmt))


def test_anchor_exactness():
    c = VoltageBerCurve()
    for v, b in DEFAULT_ANCHORS:
        assert c.ber_at(v) == b


def test_log_linear_midpoint():
    c = VoltageBerCurve()
    assert c.ber_at(0.81) == pytest.approx(1e-9, rel=1e-9)
    assert c.ber_at(0.79) == pytest.approx(1e-7, rel=1e-9)


def test_ber_monotone_down_the_grid():
    c = VoltageBerCurve()
    bers = [c.ber_at(v) for v in voltage_grid(c, 0.001)]
    assert all(b1 >= b0 for b0, b1 in zip(bers, bers[1:]))
    assert voltage_grid(c, 0.001)[0] == 0.9 and voltage_grid(c, 0.001)[-1] == 0.7


def test_curve_validation_and_range():
    c = VoltageBerCurve()
    with pytest.raises(VoltageRangeError):
        c.ber_at(0.95)
    with pytest.raises(VoltageRangeError):
        c.ber_at(0.6)
    with pytest.raises(ValueError):
        VoltageBerCurve(((0.8, 1e-3), (0.9, 1e-2)))
    with pytest.raises(ValueError):
        VoltageBerCurve(((0.8, 1e-3),))
    z = VoltageBerCurve.zero()
    assert z.ber_at(0.75) == 0.0


def test_power_and_runtime_models(small):
    m, _ = small
    p = PowerModel()
    assert p.power(0.9) == 1.0
    assert math.isclose(p.power(0.45), 0.25)
    rt = RuntimeModel()
    assert rt.runtime(m, Engine.WINOGRAD) < rt.runtime(m, Engine.DIRECT)
    with pytest.raises(ValueError):
        RuntimeModel(throughput_mul=0)


def test_full_budget_and_zero_curve_give_v_min(small):
    m, ds = small
    c = VoltageBerCurve()
    v, _ = min_safe_voltage(m, ds, TmrMode.ST_CONV, c, 1.0, grid_step=0.01, trials=1)
    assert v == c.v_min
    z = VoltageBerCurve.zero()
    v, acc = min_safe_voltage(m, ds, TmrMode.WG_W_AFT, z, 0.01, grid_step=0.01, trials=1)
    assert v == z.v_min and acc.accuracy == 1.0


def test_scan_monotone_in_budget(small):
    m, ds = small
    c = VoltageBerCurve()
    scan = scan_voltages(m, ds, Engine.DIRECT, c, 0.10, grid_step=0.005, trials=8)
    vs = [choose_voltage(scan, c, b, 0.005) for b in (0.01, 0.02, 0.05, 0.10)]
    assert all(b <= a for a, b in zip(vs, vs[1:]))
    with pytest.raises(ValueError):
        choose_voltage(scan, c, 0.0)


def test_infeasible_budget(small):
    m, ds = small
    harsh = VoltageBerCurve(((0.7, 0.2), (0.9, 0.1)))
    scan = scan_voltages(m, ds, Engine.DIRECT, harsh, 0.01, grid_step=0.1, trials=1)
    with pytest.raises(InfeasibleBudgetError):
        choose_voltage(scan, harsh, 0.01, 0.1)


def test_energy_report_normalization(small):
    m, ds = small
    budgets = (0.01, 0.05)
    a = energy_report(m, ds, budgets, grid_step=0.01, trials=8)
    b = energy_report(m, ds, budgets, power=PowerModel(p0=2.0), grid_step=0.01, trials=8)
    assert a.baseline.normalized == 1.0
    for k, cell in a.cells.items():
        assert cell.normalized == pytest.approx(b.cells[k].normalized, rel=1e-12)
        assert cell.energy * 2 == pytest.approx(b.cells[k].energy, rel=1e-12)
        assert cell.normalized <= 1.0
    assert len(a.rows()) == 1 + 3 * len(budgets)
    # WG_WO_AFT is gated by the direct curve, so it runs at the ST voltage
    for bud in budgets:
        assert a.cells[(TmrMode.WG_WO_AFT, bud)].voltage == a.cells[(TmrMode.ST_CONV, bud)].voltage
