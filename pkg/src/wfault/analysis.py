"""Network-wise, layer-wise and op-type vulnerability analyses."""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from scipy.stats import spearmanr

from .conv import ADD, MUL, Engine
from .faults import FaultConfig, FaultMode
from .network import AccuracyResult, Dataset, Model, evaluate_accuracy

DEFAULT_GRID = tuple(float(f"{v:.3g}") for v in np.logspace(-9, -3, 13))


@dataclass(frozen=True)
class SweepSpec:
    bers: tuple[float, ...] = DEFAULT_GRID
    engines: tuple[Engine, ...] = (Engine.DIRECT, Engine.WINOGRAD)
    modes: tuple[FaultMode, ...] = (FaultMode.OP_LEVEL,)
    trials: int = 5
    seed: int = 0
    layer_scope: frozenset | None = None  # None: every weighted layer is faulty

    def __post_init__(self):
        if not self.bers:
            raise ValueError("ber grid must not be empty")
        if list(self.bers) != sorted(self.bers):
            raise ValueError("ber grid must be sorted ascending")
        object.__setattr__(self, "engines", tuple(Engine(e) for e in self.engines))
        object.__setattr__(self, "modes", tuple(FaultMode(m) for m in self.modes))


@dataclass(frozen=True)
class Measurement:
    """One CSV row: an accuracy measured under one configuration."""

    experiment: str
    engine: str
    mode: str
    ber: float
    target: str
    result: AccuracyResult

    def row(self) -> dict:
        r = self.result
        return {"experiment": self.experiment, "engine": self.engine, "mode": self.mode, "ber": f"{self.ber:.6g}",
                "target": self.target, "accuracy": f"{r.accuracy:.6f}", "ci_lo": f"{r.ci_lo:.6f}",
                "ci_hi": f"{r.ci_hi:.6f}", "correct": r.correct, "total": r.total}


def ci_ge(a: AccuracyResult, b: AccuracyResult) -> bool:
    """``a >= b`` unless the data say otherwise: a's upper bound reaches b's lower bound."""
    return a.ci_hi >= b.ci_lo


def ci_separated_gt(a: AccuracyResult, b: AccuracyResult) -> bool:
    return a.ci_lo > b.ci_hi


def overlap(a: AccuracyResult, b: AccuracyResult) -> bool:
    return a.ci_lo <= b.ci_hi and b.ci_lo <= a.ci_hi


def _cfg(mode, ber, seed, **kw) -> FaultConfig:
    return FaultConfig(FaultMode(mode), ber, seed=seed, **kw)


@dataclass
class SweepResult:
    points: dict = field(default_factory=dict)  # (engine, mode, ber) -> AccuracyResult

    def series(self, engine, mode) -> list[tuple[float, AccuracyResult]]:
        return sorted((b, r) for (e, m, b), r in self.points.items() if e == Engine(engine) and m == FaultMode(mode))

    def improvement(self, mode) -> list[tuple[float, float]]:
        """Winograd-minus-direct accuracy per ber."""
        st = dict(self.series(Engine.DIRECT, mode))
        wg = dict(self.series(Engine.WINOGRAD, mode))
        return [(b, wg[b].accuracy - st[b].accuracy) for b in sorted(st) if b in wg]

    def measurements(self, experiment="sweep") -> list[Measurement]:
        return [Measurement(experiment, e.value, m.value, b, "", r) for (e, m, b), r in sorted(
            self.points.items(), key=lambda kv: (kv[0][0].value, kv[0][1].value, kv[0][2]))]


def ber_sweep(model: Model, dataset: Dataset, spec: SweepSpec, workers: int = 1) -> SweepResult:
    out = SweepResult()
    for eng in spec.engines:
        m = model.with_engine(eng)
        for mode in spec.modes:
            for ber in spec.bers:
                out.points[(eng, mode, ber)] = evaluate_accuracy(m, dataset, _cfg(mode, ber, spec.seed, layer_scope=spec.layer_scope),
                                                                 spec.trials,
                                                                 workers=workers)
    return out


def monotone_non_increasing(series: list[tuple[float, AccuracyResult]]) -> bool:
    """No later grid point is CI-separated above an earlier one."""
    for i, (_, a) in enumerate(series):
        for _, b in series[i + 1:]:
            if ci_separated_gt(b, a):
                return False
    return True


@dataclass
class FiModeComparison:
    sweep: SweepResult
    neuron_overlap: dict  # ber -> bool
    op_separated: dict  # ber -> bool

    @property
    def neuron_indistinguishable(self) -> bool:
        return all(self.neuron_overlap.values())

    @property
    def op_level_separates(self) -> bool:
        return any(self.op_separated.values())


def fi_mode_compare(model: Model, dataset: Dataset, spec: SweepSpec, workers: int = 1) -> FiModeComparison:
    spec = replace(spec, modes=(FaultMode.NEURON_LEVEL, FaultMode.OP_LEVEL),
                   engines=(Engine.DIRECT, Engine.WINOGRAD))
    sw = ber_sweep(model, dataset, spec, workers)
    neu, op = {}, {}
    for ber in spec.bers:
        p = sw.points
        neu[ber] = overlap(p[(Engine.DIRECT, FaultMode.NEURON_LEVEL, ber)], p[(Engine.WINOGRAD, FaultMode.NEURON_LEVEL, ber)])
        op[ber] = ci_separated_gt(p[(Engine.WINOGRAD, FaultMode.OP_LEVEL, ber)], p[(Engine.DIRECT, FaultMode.OP_LEVEL, ber)])
    return FiModeComparison(sw, neu, op)


def choose_analysis_ber(sweep_or_series, target: float = 0.5) -> float:
    """Grid ber whose accuracy is closest to ``target`` (ties go to the smaller ber)."""
    series = sweep_or_series.series(Engine.DIRECT, FaultMode.OP_LEVEL) if isinstance(sweep_or_series, SweepResult) \
        else sweep_or_series
    return min(series, key=lambda br: (abs(br[1].accuracy - target), br[0]))[0]


@dataclass
class LayerVulnerability:
    engine: Engine
    ber: float
    baseline: AccuracyResult
    exempted: dict  # layer_id -> AccuracyResult
    n_mul: dict
    n_add: dict

    def vf(self, layer_id: int) -> float:
        return self.exempted[layer_id].accuracy - self.baseline.accuracy

    def vf_ci(self, layer_id: int) -> float:
        return self.exempted[layer_id].ci_half + self.baseline.ci_half

    @property
    def layers(self) -> list[int]:
        return sorted(self.exempted)

    def spearman(self) -> float:
        ls = self.layers
        if len(ls) < 2:
            return float("nan")
        return float(spearmanr([self.vf(l) for l in ls], [self.n_mul[l] for l in ls]).statistic)

    def measurements(self) -> list[Measurement]:
        rows = [Measurement("layer_vuln", self.engine.value, FaultMode.OP_LEVEL.value, self.ber, "baseline",
                            self.baseline)]
        rows += [Measurement("layer_vuln", self.engine.value, FaultMode.OP_LEVEL.value, self.ber, f"layer{l}",
                             self.exempted[l]) for l in self.layers]
        return rows


def layer_vulnerability(model: Model, dataset: Dataset, ber: float, engine: Engine | str, trials: int = 5,
                        seed: int = 0, workers: int = 1, baseline: AccuracyResult | None = None,
                        layer_scope: frozenset | None = None) -> LayerVulnerability:
    """VF_L = Acc(every layer faulty except L) - Acc(every layer faulty), paired streams."""
    if ber <= 0:
        raise ValueError("layer vulnerability needs ber > 0")
    engine = Engine(engine)
    m = model.with_engine(engine)
    cfg = _cfg(FaultMode.OP_LEVEL, ber, seed, layer_scope=layer_scope)
    if baseline is None:
        baseline = evaluate_accuracy(m, dataset, cfg, trials, workers=workers)
    exempt, n_mul, n_add = {}, {}, {}
    for l in m.weighted_layers:
        if not cfg.layer_active(l):
            continue
        exempt[l] = evaluate_accuracy(m, dataset, replace(cfg, excluded_layer=l), trials, workers=workers)
        lay = m.layout(l)
        n_mul[l], n_add[l] = lay.n_sites(MUL), lay.n_sites(ADD)
    return LayerVulnerability(engine, ber, baseline, exempt, n_mul, n_add)


@dataclass
class OpTypeVulnerability:
    engine: Engine
    ber: float
    baseline: AccuracyResult
    mul_free: AccuracyResult  # only ADD results faulty
    add_free: AccuracyResult  # only MUL results faulty

    @property
    def mul_sensitivity(self) -> float:
        return self.mul_free.accuracy - self.baseline.accuracy

    @property
    def add_sensitivity(self) -> float:
        return self.add_free.accuracy - self.baseline.accuracy

    def measurements(self) -> list[Measurement]:
        e, m = self.engine.value, FaultMode.OP_LEVEL.value
        return [Measurement("optype_vuln", e, m, self.ber, "baseline", self.baseline),
                Measurement("optype_vuln", e, m, self.ber, "mul_fault_free", self.mul_free),
                Measurement("optype_vuln", e, m, self.ber, "add_fault_free", self.add_free)]


def op_type_vulnerability(model: Model, dataset: Dataset, ber: float, engine: Engine | str, trials: int = 5,
                          seed: int = 0, workers: int = 1, layer_scope: frozenset | None = None) -> OpTypeVulnerability:
    engine = Engine(engine)
    m = model.with_engine(engine)
    cfg = _cfg(FaultMode.OP_LEVEL, ber, seed, layer_scope=layer_scope)
    base = evaluate_accuracy(m, dataset, cfg, trials, workers=workers)
    mul_free = evaluate_accuracy(m, dataset, replace(cfg, op_kind_scope=frozenset({ADD})), trials, workers=workers)
    add_free = evaluate_accuracy(m, dataset, replace(cfg, op_kind_scope=frozenset({MUL})), trials, workers=workers)
    return OpTypeVulnerability(engine, ber, base, mul_free, add_free)
