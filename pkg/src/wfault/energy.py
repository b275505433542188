"""Voltage-to-BER curve, analytical power and runtime, and the safe-voltage search."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

from .conv import ADD, MUL, Engine
from .faults import FaultConfig, FaultMode
from .network import AccuracyResult, Dataset, Model, evaluate_accuracy
from .tmr import TmrMode

DEFAULT_ANCHORS = ((0.90, 1e-14), (0.82, 1e-10), (0.80, 1e-8), (0.78, 1e-6), (0.74, 1e-4), (0.70, 1e-2))


class VoltageRangeError(ValueError):
    pass


class InfeasibleBudgetError(RuntimeError):
    pass


@dataclass(frozen=True)
class VoltageBerCurve:
    anchors: tuple = DEFAULT_ANCHORS

    def __post_init__(self):
        pts = tuple(sorted((float(v), float(b)) for v, b in self.anchors))
        if len(pts) < 2:
            raise ValueError("need at least two anchors")
        for (v0, b0), (v1, b1) in zip(pts, pts[1:]):
            if v0 == v1:
                raise ValueError(f"duplicate anchor voltage {v0}")
            if b1 > b0 or (b1 == b0 and b0 > 0):
                raise ValueError("ber must decrease strictly with voltage")
            if b0 < 0 or b1 < 0:
                raise ValueError("ber must be non-negative")
        object.__setattr__(self, "anchors", pts)

    @classmethod
    def zero(cls, v_min=0.70, v_max=0.90) -> "VoltageBerCurve":
        return cls(((v_min, 0.0), (v_max, 0.0)))

    @property
    def v_min(self) -> float:
        return self.anchors[0][0]

    @property
    def v_max(self) -> float:
        return self.anchors[-1][0]

    def ber_at(self, v: float) -> float:
        if not self.v_min - 1e-12 <= v <= self.v_max + 1e-12:
            raise VoltageRangeError(f"voltage {v} outside [{self.v_min}, {self.v_max}]")
        pts = self.anchors
        for (v0, b0), (v1, b1) in zip(pts, pts[1:]):
            if v <= v1 + 1e-12:
                if abs(v - v0) < 1e-12:
                    return b0
                if abs(v - v1) < 1e-12:
                    return b1
                t = (v - v0) / (v1 - v0)
                if b0 == 0 or b1 == 0:
                    return b0 + t * (b1 - b0)
                return math.exp(math.log(b0) + t * (math.log(b1) - math.log(b0)))
        return pts[-1][1]


def ber_at_voltage(curve: VoltageBerCurve, v: float) -> float:
    return curve.ber_at(v)


@dataclass(frozen=True)
class PowerModel:
    p0: float = 1.0
    v0: float = 0.90
    f0: float = 667e6

    def power(self, v: float) -> float:
        return self.p0 * (v / self.v0) ** 2


@dataclass(frozen=True)
class RuntimeModel:
    throughput_mul: float = 256.0
    throughput_add: float = 512.0
    overhead_cycles: float = 0.0
    freq: float = 667e6

    def __post_init__(self):
        if self.throughput_mul <= 0 or self.throughput_add <= 0 or self.freq <= 0 or self.overhead_cycles < 0:
            raise ValueError("throughputs and frequency must be positive")

    def cycles(self, model: Model, engine: Engine | str) -> float:
        m = model.with_engine(engine)
        total = 0.0
        for l in m.weighted_layers:
            lay = m.layout(l)
            total += lay.n_sites(MUL) / self.throughput_mul + lay.n_sites(ADD) / self.throughput_add + self.overhead_cycles
        return total

    def runtime(self, model: Model, engine: Engine | str) -> float:
        return self.cycles(model, engine) / self.freq


# (engine that executes, engine whose accuracy curve gates the voltage)
MODE_ENGINES = {
    TmrMode.ST_CONV: (Engine.DIRECT, Engine.DIRECT),
    TmrMode.WG_WO_AFT: (Engine.WINOGRAD, Engine.DIRECT),
    TmrMode.WG_W_AFT: (Engine.WINOGRAD, Engine.WINOGRAD),
}


def voltage_grid(curve: VoltageBerCurve, step: float = 0.005) -> list[float]:
    """Grid from v_max down to v_min."""
    n = int(round((curve.v_max - curve.v_min) / step))
    return [round(curve.v_max - i * step, 6) for i in range(n + 1)]


@dataclass
class VoltageScan:
    """Accuracy measured along a downward voltage scan for one engine."""

    engine: Engine
    fault_free: AccuracyResult
    points: dict = field(default_factory=dict)  # voltage -> (ber, AccuracyResult)

    def passes(self, v: float, budget: float) -> bool:
        threshold = self.fault_free.accuracy - budget
        ber, acc = self.points[v]
        # a zero-ber run is the fault-free run itself, so there is no sampling error to guard against
        return threshold <= 0 or ber == 0 or acc.ci_lo >= threshold


def scan_voltages(model: Model, dataset: Dataset, engine: Engine | str, curve: VoltageBerCurve, max_budget: float,
                  grid_step: float = 0.005, trials: int = 5, seed: int = 0, workers: int = 1,
                  layer_scope: frozenset | None = None) -> VoltageScan:
    """Walk down the grid until the loosest budget fails; lower voltages can never be chosen."""
    m = model.with_engine(engine)
    ff = evaluate_accuracy(m, dataset, FaultConfig(seed=seed), 1, workers=workers)
    scan = VoltageScan(Engine(engine), ff)
    threshold = ff.accuracy - max_budget
    for v in voltage_grid(curve, grid_step):
        ber = curve.ber_at(v)
        if threshold <= 0 and v != curve.v_min:
            # every accuracy passes; only the final grid point needs a measurement
            continue
        cfg = FaultConfig(FaultMode.OP_LEVEL, ber, seed=seed, layer_scope=layer_scope)
        scan.points[v] = (ber, evaluate_accuracy(m, dataset, cfg, trials, workers=workers))
        if not scan.passes(v, max_budget):
            break
    return scan


def choose_voltage(scan: VoltageScan, curve: VoltageBerCurve, budget: float, grid_step: float = 0.005) -> float:
    """Lowest grid voltage reached by a downward scan in which every point so far passes."""
    if not 0 < budget <= 1:
        raise ValueError("loss budget must be in (0, 1]")
    chosen = None
    for v in voltage_grid(curve, grid_step):
        if scan.fault_free.accuracy - budget <= 0:
            chosen = v
            continue
        if v not in scan.points or not scan.passes(v, budget):
            break
        chosen = v
    if chosen is None:
        raise InfeasibleBudgetError(f"budget {budget} violated even at {curve.v_max} V")
    return chosen


def min_safe_voltage(model: Model, dataset: Dataset, mode: TmrMode | str, curve: VoltageBerCurve, loss_budget: float,
                     grid_step: float = 0.005, trials: int = 5, seed: int = 0, workers: int = 1,
                     layer_scope: frozenset | None = None) -> tuple[float, AccuracyResult]:
    """Voltage chosen for ``mode`` and the accuracy of its executing engine there."""
    mode = TmrMode(mode)
    exec_eng, gate_eng = MODE_ENGINES[mode]
    scan = scan_voltages(model, dataset, gate_eng, curve, loss_budget, grid_step, trials, seed, workers, layer_scope)
    v = choose_voltage(scan, curve, loss_budget, grid_step)
    if exec_eng == gate_eng:
        acc = scan.points[v][1]
    else:
        acc = evaluate_accuracy(model.with_engine(exec_eng), dataset,
                                FaultConfig(FaultMode.OP_LEVEL, curve.ber_at(v), seed=seed, layer_scope=layer_scope),
                                trials, workers=workers)
    return v, acc


@dataclass(frozen=True)
class EnergyCell:
    mode: str
    budget: float
    voltage: float
    ber: float
    accuracy: AccuracyResult
    power: float
    runtime: float
    energy: float
    normalized: float

    def row(self) -> dict:
        a = self.accuracy
        return {"mode": self.mode, "budget": f"{self.budget:.4f}", "voltage": f"{self.voltage:.3f}",
                "ber": f"{self.ber:.6g}", "accuracy": f"{a.accuracy:.6f}", "ci_lo": f"{a.ci_lo:.6f}",
                "ci_hi": f"{a.ci_hi:.6f}", "power": f"{self.power:.9g}", "runtime": f"{self.runtime:.9g}",
                "energy": f"{self.energy:.9g}", "normalized_energy": f"{self.normalized:.9f}"}


@dataclass
class EnergyReport:
    baseline: EnergyCell
    cells: dict  # (mode, budget) -> EnergyCell
    scans: dict  # engine -> VoltageScan

    def rows(self) -> list[dict]:
        return [self.baseline.row()] + [self.cells[k].row() for k in sorted(self.cells, key=lambda k: (k[0].value, k[1]))]


def energy_report(model: Model, dataset: Dataset, budgets, curve: VoltageBerCurve = VoltageBerCurve(),
                  power: PowerModel = PowerModel(), runtime: RuntimeModel = RuntimeModel(), modes=tuple(TmrMode),
                  grid_step: float = 0.005, trials: int = 5, seed: int = 0, workers: int = 1,
                  layer_scope: frozenset | None = None) -> EnergyReport:
    budgets = tuple(sorted(budgets))
    modes = tuple(TmrMode(m) for m in modes)
    engines = sorted({e for m in modes for e in MODE_ENGINES[m]}, key=lambda e: e.value)
    scans = {e: scan_voltages(model, dataset, e, curve, max(budgets), grid_step, trials, seed, workers, layer_scope)
             for e in engines}

    rt = {e: runtime.runtime(model, e) for e in engines}
    rt[Engine.DIRECT] = runtime.runtime(model, Engine.DIRECT)
    e0 = power.power(power.v0) * rt[Engine.DIRECT]
    ff = evaluate_accuracy(model.with_engine(Engine.DIRECT), dataset, FaultConfig(seed=seed), 1, workers=workers)
    base = EnergyCell("BASELINE", 0.0, power.v0, curve.ber_at(power.v0) if curve.v_min <= power.v0 <= curve.v_max
                      else 0.0, ff, power.power(power.v0), rt[Engine.DIRECT], e0, 1.0)
    cells = {}
    for mode in modes:
        exec_eng, gate_eng = MODE_ENGINES[mode]
        for b in budgets:
            v = choose_voltage(scans[gate_eng], curve, b, grid_step)
            ber = curve.ber_at(v)
            pts = scans[exec_eng].points
            if v in pts:
                acc = pts[v][1]
            else:
                acc = evaluate_accuracy(model.with_engine(exec_eng), dataset,
                                        FaultConfig(FaultMode.OP_LEVEL, ber, seed=seed, layer_scope=layer_scope),
                                        trials, workers=workers)
            p = power.power(v)
            e = p * rt[exec_eng]
            cells[(mode, b)] = EnergyCell(mode.value, b, v, ber, acc, p, rt[exec_eng], e, e / e0)
    return EnergyReport(base, cells, scans)
