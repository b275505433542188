"""Fine-grained, vulnerability-ranked TMR planning with overhead accounting."""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from enum import Enum

from .analysis import layer_vulnerability
from .conv import ADD, MUL, Engine
from .faults import FaultConfig, FaultMode, ProtectionSet, protected_count
from .network import AccuracyResult, Dataset, Model, evaluate_accuracy


class TmrMode(str, Enum):
    ST_CONV = "ST_CONV"
    WG_WO_AFT = "WG_WO_AFT"
    WG_W_AFT = "WG_W_AFT"


VF_ENGINE = {TmrMode.ST_CONV: Engine.DIRECT, TmrMode.WG_WO_AFT: Engine.DIRECT, TmrMode.WG_W_AFT: Engine.WINOGRAD}
EXEC_ENGINE = {TmrMode.ST_CONV: Engine.DIRECT, TmrMode.WG_WO_AFT: Engine.WINOGRAD, TmrMode.WG_W_AFT: Engine.WINOGRAD}


class GoalUnreachableError(RuntimeError):
    pass


@dataclass(frozen=True)
class CostModel:
    cost_mul: float = 1.0
    cost_add: float = 0.2

    def __post_init__(self):
        if self.cost_mul <= 0 or self.cost_add <= 0:
            raise ValueError("op costs must be positive")

    def cost(self, kind: str) -> float:
        return self.cost_mul if kind == MUL else self.cost_add


@dataclass
class TmrPlan:
    mode: TmrMode
    ber: float
    goal: float
    fractions: dict  # (layer_id, kind) -> fraction
    selection_seed: int
    accuracy: AccuracyResult
    overhead_counts: dict  # kind -> 2 x protected sites
    overhead_weighted: float
    steps: int = 0
    layer_fractions: dict = field(default_factory=dict)

    def protection(self) -> ProtectionSet:
        return ProtectionSet.from_dict(self.fractions, self.selection_seed)

    def to_json(self) -> dict:
        a = self.accuracy
        return {
            "mode": self.mode.value, "ber": self.ber, "goal": self.goal, "selection_seed": self.selection_seed,
            "steps": self.steps,
            "fractions": [{"layer": l, "kind": k, "fraction": round(f, 12)} for (l, k), f in sorted(self.fractions.items())],
            "accuracy": a.accuracy, "ci_lo": a.ci_lo, "ci_hi": a.ci_hi,
            "overhead_counts": dict(self.overhead_counts), "overhead_weighted": self.overhead_weighted,
        }


def kind_fractions(layer_fraction: float, n_mul: int, n_add: int) -> tuple[float, float]:
    """Split a layer-level protected fraction into (MUL, ADD) fractions, MUL sites first."""
    target = layer_fraction * (n_mul + n_add)
    f_mul = min(1.0, target / n_mul) if n_mul else 0.0
    rest = max(0.0, target - n_mul)
    f_add = min(1.0, rest / n_add) if n_add else 0.0
    return f_mul, f_add


def overhead_of(model: Model, fractions: dict, selection_seed: int, cost: CostModel) -> tuple[dict, float]:
    """Extra executions (two per protected site) per kind, and their weighted cost."""
    counts = {MUL: 0, ADD: 0}
    prot = ProtectionSet.from_dict(fractions, selection_seed)
    for l in model.weighted_layers:
        lay = model.layout(l)
        for kind in (MUL, ADD):
            if prot.fraction(l, kind) > 0:
                counts[kind] += 2 * protected_count(prot, l, lay.kind_stages(kind))
    return counts, counts[MUL] * cost.cost_mul + counts[ADD] * cost.cost_add


def nominal_overhead(model: Model, fractions: dict, cost: CostModel) -> float:
    """Sum of 2 * fraction * site_count * cost; equals the realized overhead in expectation."""
    total = 0.0
    for (l, kind), f in fractions.items():
        total += 2 * f * model.layout(l).n_sites(kind) * cost.cost(kind)
    return total


@dataclass
class Trajectory:
    """Planner states in order; step 0 is the unprotected network."""

    mode: TmrMode
    ber: float
    selection_seed: int
    states: list = field(default_factory=list)  # (layer_fractions, kind_fractions, AccuracyResult)
    vf: dict = field(default_factory=dict)
    layer_scope: frozenset | None = None

    def first_meeting(self, goal: float) -> int | None:
        for i, (_, _, acc) in enumerate(self.states):
            if acc.accuracy >= goal:
                return i
        return None


def _schedule_step(vf: dict, lf: dict, delta: float) -> int | None:
    """Layer maximizing VF x (1 - protected fraction); ties go to the lowest index."""
    best, best_p = None, None
    for l in sorted(lf):
        if lf[l] >= 1.0 - 1e-12:
            continue
        p = max(vf.get(l, 0.0), 0.0) * (1.0 - lf[l])
        if best is None or p > best_p:
            best, best_p = l, p
    return best


def _translate(model_exec: Model, lf: dict) -> dict:
    fr = {}
    for l, f in lf.items():
        if f <= 0:
            continue
        lay = model_exec.layout(l)
        fm, fa = kind_fractions(f, lay.n_sites(MUL), lay.n_sites(ADD))
        if fm > 0:
            fr[(l, MUL)] = fm
        if fa > 0:
            fr[(l, ADD)] = fa
    return fr


def plan_trajectory(model: Model, dataset: Dataset, mode: TmrMode | str, ber: float, *, stop_at: float = 1.0,
                    delta: float = 0.1, trials: int = 5, seed: int = 0, selection_seed: int = 0, workers: int = 1,
                    vf: dict | None = None, layer_scope: frozenset | None = None) -> Trajectory:
    """Climb protection one step at a time until accuracy reaches ``stop_at`` or all sites are protected."""
    if not 0 < delta <= 1:
        raise ValueError("delta must be in (0, 1]")
    mode = TmrMode(mode)
    if mode == TmrMode.WG_WO_AFT:
        # unaware of winograd's tolerance: the direct-engine climb decides both the schedule and where it stops
        st = plan_trajectory(model, dataset, TmrMode.ST_CONV, ber, stop_at=stop_at, delta=delta, trials=trials,
                             seed=seed, selection_seed=selection_seed, workers=workers, vf=vf,
                             layer_scope=layer_scope)
        return replace(st, mode=mode)
    m_ex = model.with_engine(EXEC_ENGINE[mode])
    if vf is None:
        rep = layer_vulnerability(model, dataset, ber, VF_ENGINE[mode], trials, seed, workers,
                                  layer_scope=layer_scope)
        vf = {l: rep.vf(l) for l in rep.layers}
    base_cfg = FaultConfig(FaultMode.OP_LEVEL, ber, seed=seed, layer_scope=layer_scope)
    tr = Trajectory(mode, ber, selection_seed, vf=dict(vf), layer_scope=base_cfg.layer_scope)
    # layers outside the fault scope never need protection
    lf = {l: 0.0 for l in m_ex.weighted_layers if base_cfg.layer_active(l)}
    acc = evaluate_accuracy(m_ex, dataset, base_cfg, trials, workers=workers)
    tr.states.append((dict(lf), {}, acc))
    while acc.accuracy < stop_at:
        l = _schedule_step(vf, lf, delta)
        if l is None:
            # non-positive VFs: fall back to index order so the climb always terminates
            l = next((k for k in sorted(lf) if lf[k] < 1.0 - 1e-12), None)
            if l is None:
                break
        lf[l] = min(1.0, round(lf[l] + delta, 12))
        fr = _translate(m_ex, lf)
        cfg = replace(base_cfg, protection=ProtectionSet.from_dict(fr, selection_seed))
        acc = evaluate_accuracy(m_ex, dataset, cfg, trials, workers=workers)
        tr.states.append((dict(lf), fr, acc))
    return tr


def plan_from_trajectory(model: Model, dataset: Dataset, tr: Trajectory, goal: float, cost: CostModel = CostModel(),
                         *, trials: int = 5, seed: int = 0, workers: int = 1) -> TmrPlan:
    """Plan for ``goal``: the first climb state whose gating accuracy meets it.

    The reported accuracy is measured on the executing engine; for WG_WO_AFT this
    means re-running the direct-engine plan (same per-kind fractions) on winograd.
    """
    i = tr.first_meeting(goal)
    if i is None:
        raise GoalUnreachableError(f"{tr.mode.value}: accuracy {tr.states[-1][2].accuracy:.4f} with full protection "
                                   f"misses goal {goal:.4f}")
    lf, fr, acc = tr.states[i]
    m_ex = model.with_engine(EXEC_ENGINE[tr.mode])
    if tr.mode == TmrMode.WG_WO_AFT:
        cfg = FaultConfig(FaultMode.OP_LEVEL, tr.ber, seed=seed, layer_scope=tr.layer_scope,
                          protection=ProtectionSet.from_dict(fr, tr.selection_seed))
        acc = evaluate_accuracy(m_ex, dataset, cfg, trials, workers=workers)
    counts, weighted = overhead_of(m_ex, fr, tr.selection_seed, cost)
    return TmrPlan(tr.mode, tr.ber, goal, dict(fr), tr.selection_seed, acc, counts, weighted, i, dict(lf))


def plan_tmr(model: Model, dataset: Dataset, mode: TmrMode | str, ber: float, accuracy_goal: float,
             delta: float = 0.1, trials: int = 5, *, seed: int = 0, selection_seed: int = 0, workers: int = 1,
             cost: CostModel = CostModel(), fault_free_accuracy: float = 1.0,
             layer_scope: frozenset | None = None) -> TmrPlan:
    if accuracy_goal > fault_free_accuracy:
        raise ValueError("accuracy goal exceeds fault-free accuracy")
    tr = plan_trajectory(model, dataset, mode, ber, stop_at=accuracy_goal, delta=delta, trials=trials, seed=seed,
                         selection_seed=selection_seed, workers=workers, layer_scope=layer_scope)
    return plan_from_trajectory(model, dataset, tr, accuracy_goal, cost, trials=trials, seed=seed, workers=workers)


def normalized_overhead(plan: TmrPlan, reference: TmrPlan) -> tuple[float, float]:
    """(weighted ratio, raw-count ratio) against a reference plan at the same goal."""
    def ratio(a, b):
        if b == 0:
            if a == 0:
                return 1.0
            raise ZeroDivisionError("reference overhead is zero but plan overhead is not")
        return a / b
    raw = sum(plan.overhead_counts.values())
    raw_ref = sum(reference.overhead_counts.values())
    return ratio(plan.overhead_weighted, reference.overhead_weighted), ratio(raw, raw_ref)


@dataclass
class ModeComparison:
    ber: float
    goals: tuple
    plans: dict  # (mode, goal) -> TmrPlan
    trajectories: dict  # mode -> Trajectory

    def normalized(self, mode: TmrMode, goal: float) -> tuple[float, float]:
        return normalized_overhead(self.plans[(TmrMode(mode), goal)], self.plans[(TmrMode.ST_CONV, goal)])

    def series(self, mode: TmrMode) -> list[float]:
        return [self.normalized(mode, g)[0] for g in self.goals]

    def rows(self) -> list[dict]:
        out = []
        for mode in TmrMode:
            for g in self.goals:
                p = self.plans[(mode, g)]
                w, r = self.normalized(mode, g)
                out.append({"mode": mode.value, "ber": f"{self.ber:.6g}", "goal": f"{g:.6f}", "steps": p.steps,
                            "accuracy": f"{p.accuracy.accuracy:.6f}", "ci_lo": f"{p.accuracy.ci_lo:.6f}",
                            "ci_hi": f"{p.accuracy.ci_hi:.6f}", "extra_mul": p.overhead_counts[MUL],
                            "extra_add": p.overhead_counts[ADD], "overhead_weighted": f"{p.overhead_weighted:.6f}",
                            "normalized_weighted": f"{w:.6f}", "normalized_raw": f"{r:.6f}"})
        return out


def compare_modes(model: Model, dataset: Dataset, ber: float, goals, *, delta: float = 0.1, trials: int = 5,
                  seed: int = 0, selection_seed: int = 0, workers: int = 1, cost: CostModel = CostModel(),
                  layer_scope: frozenset | None = None) -> ModeComparison:
    """One climb per mode serves every goal: the schedule never depends on the goal."""
    goals = tuple(sorted(goals))
    vfs = {}
    for eng in (Engine.DIRECT, Engine.WINOGRAD):
        rep = layer_vulnerability(model, dataset, ber, eng, trials, seed, workers, layer_scope=layer_scope)
        vfs[eng] = {l: rep.vf(l) for l in rep.layers}
    plans, trs = {}, {}
    for mode in (TmrMode.ST_CONV, TmrMode.WG_W_AFT):
        trs[mode] = plan_trajectory(model, dataset, mode, ber, stop_at=max(goals), delta=delta, trials=trials,
                                    seed=seed, selection_seed=selection_seed, workers=workers, vf=vfs[VF_ENGINE[mode]],
                                    layer_scope=layer_scope)
    trs[TmrMode.WG_WO_AFT] = replace(trs[TmrMode.ST_CONV], mode=TmrMode.WG_WO_AFT)
    for mode in TmrMode:
        for g in goals:
            plans[(mode, g)] = plan_from_trajectory(model, dataset, trs[mode], g, cost, trials=trials, seed=seed,
                                                    workers=workers)
    return ModeComparison(ber, goals, plans, trs)
