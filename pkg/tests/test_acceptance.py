"""Acceptance criteria 1-10 on the shipped default configuration.

Each test prints one line ``CRITERION <n> PASS|FAIL: <detail>`` (visible even
without ``-s``) and then asserts.  Expensive shared results (the default model,
the fault-mode sweep and the analysis ber derived from it) are computed once
per session.
"""
import time
from pathlib import Path

import numpy as np
import pytest
import yaml
from scipy import stats

from wfault.analysis import (SweepSpec, choose_analysis_ber, ci_ge, fi_mode_compare, layer_vulnerability,
                             monotone_non_increasing, op_type_vulnerability)
from wfault.cli import build_dataset, build_model, run
from wfault.config import load_config
from wfault.conv import MUL, ConvSpec, Engine, Stage, count_ops, direct_conv, winograd_conv
from wfault.energy import PowerModel, RuntimeModel, VoltageBerCurve, energy_report
from wfault.faults import FaultConfig, FaultMode, ProtectionSet, flip_bits, sample_block, stage_masks
from wfault.fxp import INT8, INT16, FxpTensor
from wfault.network import evaluate_accuracy
from wfault.rng import RngStream
from wfault.tmr import CostModel, TmrMode, compare_modes

pytestmark = pytest.mark.slow

ROOT = Path(__file__).resolve().parents[1]
DEFAULT_CONFIG = ROOT / "configs" / "default.yaml"


@pytest.fixture
def verdict(capsys):
    start = time.perf_counter()

    def report(n: int, ok: bool, detail: str, budget_s: float | None = None):
        took = time.perf_counter() - start
        within = budget_s is None or took < budget_s
        timing = f" [{took:.1f}s" + (f" of {budget_s:.0f}s budget]" if budget_s else "]")
        with capsys.disabled():
            print(f"\nCRITERION {n} {'PASS' if ok and within else 'FAIL'}: {detail}{timing}")
        assert ok, detail
        assert within, f"criterion {n} took {took:.1f}s, budget {budget_s}s"
    return report


@pytest.fixture(scope="session")
def cfg():
    return load_config(DEFAULT_CONFIG)


@pytest.fixture(scope="session")
def bench(cfg):
    model = build_model(cfg)
    return model, build_dataset(cfg, model)


@pytest.fixture(scope="session")
def fi(cfg, bench):
    model, ds = bench
    t = time.perf_counter()
    spec = SweepSpec(tuple(cfg.sweep.bers), trials=cfg.sweep.trials, seed=cfg.derived_seed("faults"))
    return fi_mode_compare(model, ds, spec, cfg.workers), time.perf_counter() - t


@pytest.fixture(scope="session")
def analysis_ber(fi, cfg):
    return choose_analysis_ber(fi[0].sweep, cfg.analysis.target_accuracy)


def fmt_series(series):
    return " ".join(f"{b:.2g}:{r.accuracy:.3f}" for b, r in series)


# ---------------------------------------------------------------------------


def test_criterion_1_winograd_exactness(verdict):
    rng = np.random.default_rng(2024)
    checked, mismatched = 0, 0
    while checked < 1000:
        fmt = INT8 if checked % 2 else INT16
        C, F = (int(v) for v in rng.integers(1, 5, 2))
        H, W = (int(v) for v in rng.integers(1, 11, 2))
        spec = ConvSpec(C, F, H, W, padding=int(rng.integers(0, 3)))
        if spec.out_h < 1 or spec.out_w < 1:
            continue
        half = 1 << (fmt.word_bits - 1)
        x = FxpTensor(rng.integers(-half, half, (C, H, W)), fmt)
        w = FxpTensor(rng.integers(-half, half, (F, C, 3, 3)), fmt)
        mismatched += not np.array_equal(winograd_conv(x, w, spec).data, direct_conv(x, w, spec).data)
        checked += 1
    verdict(1, mismatched == 0, f"{checked} random layers, {mismatched} mismatches", budget_s=60)


def test_criterion_2_multiplication_reduction(verdict):
    shapes = [(1, 1, 2, 2), (1, 1, 4, 4), (3, 8, 16, 16), (8, 16, 16, 16), (16, 32, 8, 8), (5, 7, 12, 20)]
    bad = []
    for C, F, H, W in shapes:
        spec = ConvSpec(C, F, H, W)
        wg, d = count_ops(spec, Engine.WINOGRAD).elementwise_mul, count_ops(spec, Engine.DIRECT).n_mul
        if wg * 36 != d * 16:
            bad.append((spec, wg, d))
    verdict(2, not bad, f"winograd/direct MUL = 16/36 exactly on {len(shapes)} tile-aligned shapes"
            + (f"; violations {bad}" if bad else ""), budget_s=1)


def test_criterion_3_fault_mode_comparison(fi, verdict):
    cmp, took = fi
    neuron_bad = [b for b, ok in cmp.neuron_overlap.items() if not ok]
    op_sep = [b for b, ok in cmp.op_separated.items() if ok]
    ok = cmp.neuron_indistinguishable and cmp.op_level_separates
    verdict(3, ok and took < 600, f"neuron-level CIs overlap at {len(cmp.neuron_overlap) - len(neuron_bad)}/"
            f"{len(cmp.neuron_overlap)} bers (non-overlap at {neuron_bad}); op-level winograd CI-separated above "
            f"direct at {[f'{b:.2g}' for b in op_sep]}; sweep took {took:.0f}s of 600s")


def test_criterion_4_network_trend(fi, verdict):
    sw = fi[0].sweep
    st = sw.series(Engine.DIRECT, FaultMode.OP_LEVEL)
    wg = sw.series(Engine.WINOGRAD, FaultMode.OP_LEVEL)
    mono = monotone_non_increasing(st) and monotone_non_increasing(wg)
    never_below = all(ci_ge(w, s) for (_, s), (_, w) in zip(st, wg))
    imp = sw.improvement(FaultMode.OP_LEVEL)
    some_positive = any(d > 0 for _, d in imp)
    verdict(4, mono and never_below and some_positive and fi[1] < 600,
            f"monotone={mono}; improvement CI-aware >= 0 everywhere={never_below}; "
            f"max improvement {max(d for _, d in imp):+.3f}; direct {fmt_series(st)}; winograd {fmt_series(wg)}")


def test_criterion_5_layer_vulnerability(cfg, bench, analysis_ber, verdict):
    model, ds = bench
    parts, ok = [], True
    for eng in (Engine.DIRECT, Engine.WINOGRAD):
        rep = layer_vulnerability(model, ds, analysis_ber, eng, cfg.analysis.trials, cfg.derived_seed("faults"))
        bounded = all(rep.vf(l) >= -rep.vf_ci(l) for l in rep.layers)
        rho = rep.spearman()
        ok &= bounded and rho > 0
        parts.append(f"{eng.value}: VF " + " ".join(f"L{l}={rep.vf(l):+.3f}" for l in rep.layers)
                     + f", all >= -CI {bounded}, spearman {rho:.3f}")
    verdict(5, ok, f"ber {analysis_ber:.3g}; " + "; ".join(parts), budget_s=900)


def test_criterion_6_op_type(cfg, bench, analysis_ber, verdict):
    model, ds = bench
    parts, ok = [], True
    for eng in (Engine.DIRECT, Engine.WINOGRAD):
        r = op_type_vulnerability(model, ds, analysis_ber, eng, cfg.analysis.trials, cfg.derived_seed("faults"))
        good = ci_ge(r.mul_free, r.add_free)
        ok &= good
        parts.append(f"{eng.value}: mul-fault-free {r.mul_free.accuracy:.3f} [{r.mul_free.ci_lo:.3f},"
                     f"{r.mul_free.ci_hi:.3f}] vs add-fault-free {r.add_free.accuracy:.3f} "
                     f"[{r.add_free.ci_lo:.3f},{r.add_free.ci_hi:.3f}] -> {good}")
    verdict(6, ok, f"ber {analysis_ber:.3g}; " + "; ".join(parts), budget_s=600)


def test_criterion_7_tmr_overhead(cfg, bench, analysis_ber, verdict):
    model, ds = bench
    ff = evaluate_accuracy(model, ds, FaultConfig(), 1).accuracy
    goals = [g * ff for g in cfg.tmr.goals]
    c = compare_modes(model, ds, analysis_ber, goals, delta=cfg.tmr.delta, trials=cfg.tmr.trials,
                      seed=cfg.derived_seed("faults"), selection_seed=cfg.derived_seed("selection"),
                      cost=CostModel(cfg.tmr.cost_mul, cfg.tmr.cost_add))
    st, wo, w = (c.series(m) for m in (TmrMode.ST_CONV, TmrMode.WG_WO_AFT, TmrMode.WG_W_AFT))
    ordered = all(a <= b <= s for a, b, s in zip(w, wo, st))
    mean_red = float(np.mean([b - a for a, b in zip(w, wo)]))
    st_one = all(x == 1.0 for x in st)
    verdict(7, ordered and mean_red > 0 and st_one,
            f"ber {analysis_ber:.3g}; goals {[round(g, 2) for g in goals]}; ST {st}; "
            f"WG_WO_AFT {[round(x, 3) for x in wo]}; WG_W_AFT {[round(x, 3) for x in w]}; "
            f"mean reduction W vs WO {mean_red:.3f}", budget_s=1800)


def test_criterion_8_voltage_energy(cfg, bench, verdict):
    model, ds = bench
    e = cfg.energy
    rep = energy_report(model, ds, e.budgets, VoltageBerCurve(tuple(tuple(a) for a in e.anchors)),
                        PowerModel(e.p0, e.v0, e.freq_mhz * 1e6),
                        RuntimeModel(e.throughput_mul, e.throughput_add, e.overhead_cycles, e.freq_mhz * 1e6),
                        grid_step=e.grid_step, trials=e.trials, seed=cfg.derived_seed("faults"))
    budgets = sorted(e.budgets)
    volts = {m: [rep.cells[(m, b)].voltage for b in budgets] for m in TmrMode}
    monotone = all(all(b <= a for a, b in zip(v, v[1:])) for v in volts.values())
    energy = {m: [rep.cells[(m, b)].normalized for b in budgets] for m in TmrMode}
    ordered = all(w <= wo <= s <= 1.0 for w, wo, s in
                  zip(energy[TmrMode.WG_W_AFT], energy[TmrMode.WG_WO_AFT], energy[TmrMode.ST_CONV]))
    detail = "; ".join(f"{m.value} V {volts[m]} E {[round(x, 3) for x in energy[m]]}" for m in TmrMode)
    verdict(8, monotone and ordered, f"voltage monotone {monotone}, energy ordered {ordered}; {detail}",
            budget_s=900)


def test_criterion_9_statistical_fidelity(verdict):
    n, width, ber = 1_000_000, 16, 0.01
    naive = (RngStream(90).random((n, width)) < ber).sum(axis=1)
    fast_rng = RngStream(91)
    fast = np.fromiter((bin(flip_bits(0, width, ber, fast_rng, fast_path=True) & 0xFFFF).count("1")
                        for _ in range(n)), dtype=np.int64, count=n)
    sites, masks = sample_block(("criterion9",), n, width, ber)
    block = np.zeros(n, dtype=np.int64)
    block[sites] = [bin(int(m) & 0xFFFF).count("1") for m in masks]

    def hist(x):
        return np.array([np.sum(x == 0), np.sum(x == 1), np.sum(x == 2), np.sum(x >= 3)])

    p_fast = stats.chi2_contingency(np.vstack([hist(fast), hist(naive)]))[1]
    p_block = stats.chi2_contingency(np.vstack([hist(block), hist(naive)]))[1]

    m_sites, b = 2_000_000, 0.01
    stage = Stage("mul", MUL, 0, m_sites, width)
    cfg = FaultConfig(FaultMode.OP_LEVEL, b, seed=9, protection=ProtectionSet.from_dict({(0, MUL): 1.0}))
    _, tmr_masks, _ = stage_masks(cfg, 0, stage)
    flips = int(np.unpackbits(np.asarray(tmr_masks, dtype=np.uint64).view(np.uint8)).sum())
    rate = flips / (m_sites * width)
    expect = 3 * b**2 * (1 - b) + b**3
    rel = abs(rate - expect) / expect
    verdict(9, p_fast > 0.01 and p_block > 0.01 and rel < 0.05,
            f"chi-square vs naive Bernoulli over 1e6 words: geometric fast path p={p_fast:.3f}, block sampler "
            f"p={p_block:.3f}; TMR residual per bit {rate:.4e} vs {expect:.4e} ({100 * rel:.2f}% off)",
            budget_s=120)


DETERMINISM_CONFIG = {
    "dataset": {"n_samples": 40},
    "sweep": {"bers": [1e-8, 1e-7, 1e-6], "modes": ["OP_LEVEL", "NEURON_LEVEL"], "trials": 2},
    "analysis": {"trials": 2},
    "tmr": {"goals": [0.6, 0.8], "delta": 0.2, "trials": 2},
    "energy": {"budgets": [0.05, 0.1], "grid_step": 0.01, "trials": 5},
}


def test_criterion_10_determinism(tmp_path, verdict):
    cfg_path = tmp_path / "det.yaml"
    cfg_path.write_text(yaml.safe_dump(DETERMINISM_CONFIG))
    commands = ["gen", "sweep", "compare-fi", "layer-vuln", "optype-vuln", "tmr", "energy"]
    differing, failed = [], []
    for cmd in commands:
        outs = []
        for w in (1, 3, 1):
            out = tmp_path / f"{cmd}_w{w}_{len(outs)}"
            if run([cmd, "--config", str(cfg_path), "--workers", str(w), "--out", str(out)]) != 0:
                failed.append(cmd)
            outs.append({p.name: p.read_bytes() for p in out.iterdir() if not p.name.startswith("manifest_")})
        if not outs[0] or any(o != outs[0] for o in outs[1:]):
            differing.append(cmd)
    verdict(10, not differing and not failed,
            f"{len(commands)} subcommands run with --workers 1, 3, 1: differing outputs {differing}, "
            f"failed runs {failed}", budget_s=1800)
