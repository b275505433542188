"""Command-line front end: ``python -m wfault.cli <command> --config cfg.yaml``."""
from __future__ import annotations

import argparse
import csv
import io
import json
import platform
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from .analysis import (SweepSpec, ber_sweep, choose_analysis_ber, fi_mode_compare, layer_vulnerability,
                       monotone_non_increasing, op_type_vulnerability)
from .config import SCHEMA_VERSION, ConfigError, ExperimentConfig, from_dict, load_config
from .conv import Engine
from .energy import InfeasibleBudgetError, PowerModel, RuntimeModel, VoltageBerCurve, energy_report
from .faults import FaultConfig, FaultMode
from .formats import FormatError, load_dataset, load_model, save_dataset, save_model
from .network import PROFILES, LayerKind, evaluate_accuracy, generate_synthetic_model, self_label, synthetic_inputs
from .tmr import CostModel, GoalUnreachableError, TmrMode, compare_modes

COMMANDS = {
    "gen": "write the synthetic model (.wftm) and its self-labeled dataset (.wftd)",
    "sweep": "accuracy vs ber for each engine and injection mode",
    "compare-fi": "neuron-level vs op-level injection on both engines",
    "layer-vuln": "per-layer vulnerability factors at the analysis ber",
    "optype-vuln": "accuracy with MUL or ADD results kept fault-free",
    "tmr": "fine-grained TMR plans and normalized overhead for the three modes",
    "energy": "minimum safe voltage and normalized energy per loss budget",
}


class CliError(Exception):
    def __init__(self, code: str, message: str):
        super().__init__(message)
        self.code = code


# ---------------------------------------------------------------------------
# inputs


def build_model(cfg: ExperimentConfig):
    if cfg.model.source == "file":
        return load_model(cfg.model.path)
    if cfg.model.profile not in PROFILES:
        raise ConfigError(f"model.profile must be one of {sorted(PROFILES)}")
    return generate_synthetic_model(cfg.derived_seed("model"), cfg.model.profile, cfg.model.format)


def build_dataset(cfg: ExperimentConfig, model):
    if cfg.dataset.source == "file":
        ds = load_dataset(cfg.dataset.path)
        return ds.subset(min(len(ds), cfg.dataset.n_samples))
    x = synthetic_inputs(cfg.derived_seed("dataset"), cfg.dataset.n_samples, model.input_shape, model.fmt)
    return self_label(model, x)


def fault_scope(cfg: ExperimentConfig, model) -> frozenset | None:
    if cfg.include_fc:
        return None
    return frozenset(i for i in model.weighted_layers if model.layers[i].kind == LayerKind.CONV)


def analysis_ber(cfg: ExperimentConfig, model, ds) -> tuple[float, dict]:
    """Fixed ber from the config, or the sweep grid point nearest the target accuracy on the direct engine."""
    if cfg.analysis.ber != "auto":
        return float(cfg.analysis.ber), {"analysis_ber_source": "config"}
    spec = SweepSpec(tuple(cfg.sweep.bers), (Engine.DIRECT,), (FaultMode.OP_LEVEL,), cfg.sweep.trials,
                     cfg.derived_seed("faults"), fault_scope(cfg, model))
    sw = ber_sweep(model, ds, spec, cfg.workers)
    ber = choose_analysis_ber(sw, cfg.analysis.target_accuracy)
    return ber, {"analysis_ber_source": "auto", "target_accuracy": cfg.analysis.target_accuracy,
                 "direct_curve": [[b, r.accuracy] for b, r in sw.series(Engine.DIRECT, FaultMode.OP_LEVEL)]}


# ---------------------------------------------------------------------------
# outputs


def _write_rows(path: Path, rows: list[dict], fmt: str) -> Path:
    if fmt == "json":
        p = path.with_suffix(".json")
        p.write_text(json.dumps(rows, indent=1, sort_keys=True) + "\n")
        return p
    p = path.with_suffix(".csv")
    buf = io.StringIO()
    if rows:
        w = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    p.write_text(buf.getvalue())
    return p


def _write_json(path: Path, obj) -> Path:
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")
    return path


def _acc(r):
    return {"accuracy": r.accuracy, "ci_lo": r.ci_lo, "ci_hi": r.ci_hi, "correct": r.correct, "total": r.total}


# ---------------------------------------------------------------------------
# commands; each returns (rows, summary)


def cmd_sweep(cfg, model, ds):
    spec = SweepSpec(tuple(cfg.sweep.bers), tuple(cfg.sweep.engines), tuple(cfg.sweep.modes), cfg.sweep.trials,
                     cfg.derived_seed("faults"), fault_scope(cfg, model))
    sw = ber_sweep(model, ds, spec, cfg.workers)
    summary = {"improvement": {m.value: [[b, d] for b, d in sw.improvement(m)] for m in spec.modes
                               if set(spec.engines) == {Engine.DIRECT, Engine.WINOGRAD}},
               "monotone": {f"{e.value}/{m.value}": monotone_non_increasing(sw.series(e, m))
                            for e in spec.engines for m in spec.modes}}
    return [m.row() for m in sw.measurements("sweep")], summary


def cmd_compare_fi(cfg, model, ds):
    spec = SweepSpec(tuple(cfg.sweep.bers), trials=cfg.sweep.trials, seed=cfg.derived_seed("faults"),
                     layer_scope=fault_scope(cfg, model))
    cmp = fi_mode_compare(model, ds, spec, cfg.workers)
    summary = {"neuron_overlap": [[b, v] for b, v in sorted(cmp.neuron_overlap.items())],
               "op_separated": [[b, v] for b, v in sorted(cmp.op_separated.items())],
               "neuron_indistinguishable": cmp.neuron_indistinguishable,
               "op_level_separates": cmp.op_level_separates}
    return [m.row() for m in cmp.sweep.measurements("compare_fi")], summary


def cmd_layer_vuln(cfg, model, ds):
    ber, info = analysis_ber(cfg, model, ds)
    rows, summary = [], {"ber": ber, **info, "engines": {}}
    for eng in cfg.analysis.engines:
        rep = layer_vulnerability(model, ds, ber, eng, cfg.analysis.trials, cfg.derived_seed("faults"), cfg.workers,
                                  layer_scope=fault_scope(cfg, model))
        rows += [m.row() for m in rep.measurements()]
        summary["engines"][rep.engine.value] = {
            "baseline": _acc(rep.baseline), "spearman_vf_vs_mul": rep.spearman(),
            "layers": [{"layer": l, "vf": rep.vf(l), "vf_ci": rep.vf_ci(l), "n_mul": rep.n_mul[l], "n_add": rep.n_add[l]}
                       for l in rep.layers]}
    return rows, summary


def cmd_optype_vuln(cfg, model, ds):
    ber, info = analysis_ber(cfg, model, ds)
    rows, summary = [], {"ber": ber, **info, "engines": {}}
    for eng in cfg.analysis.engines:
        rep = op_type_vulnerability(model, ds, ber, eng, cfg.analysis.trials, cfg.derived_seed("faults"), cfg.workers,
                                    layer_scope=fault_scope(cfg, model))
        rows += [m.row() for m in rep.measurements()]
        summary["engines"][rep.engine.value] = {
            "baseline": _acc(rep.baseline), "mul_fault_free": _acc(rep.mul_free), "add_fault_free": _acc(rep.add_free),
            "mul_sensitivity": rep.mul_sensitivity, "add_sensitivity": rep.add_sensitivity}
    return rows, summary


def cmd_tmr(cfg, model, ds):
    ber, info = analysis_ber(cfg, model, ds)
    ff = evaluate_accuracy(model, ds, FaultConfig(), 1).accuracy
    goals = [g * ff for g in cfg.tmr.goals]
    cmp = compare_modes(model, ds, ber, goals, delta=cfg.tmr.delta, trials=cfg.tmr.trials,
                        seed=cfg.derived_seed("faults"), selection_seed=cfg.derived_seed("selection"),
                        workers=cfg.workers, cost=CostModel(cfg.tmr.cost_mul, cfg.tmr.cost_add),
                        layer_scope=fault_scope(cfg, model))
    summary = {"ber": ber, **info, "fault_free_accuracy": ff, "goals": list(cmp.goals),
               "series": {m.value: cmp.series(m) for m in TmrMode},
               "vf": {m.value: [[l, v] for l, v in sorted(cmp.trajectories[m].vf.items())] for m in TmrMode},
               "plans": [cmp.plans[(m, g)].to_json() for m in TmrMode for g in cmp.goals]}
    return cmp.rows(), summary


def cmd_energy(cfg, model, ds):
    e = cfg.energy
    curve = VoltageBerCurve(tuple(tuple(a) for a in e.anchors))
    rep = energy_report(model, ds, e.budgets, curve, PowerModel(e.p0, e.v0, e.freq_mhz * 1e6),
                        RuntimeModel(e.throughput_mul, e.throughput_add, e.overhead_cycles, e.freq_mhz * 1e6),
                        grid_step=e.grid_step, trials=e.trials, seed=cfg.derived_seed("faults"), workers=cfg.workers,
                        layer_scope=fault_scope(cfg, model))
    scans = {eng.value: [[v, ber, r.accuracy, r.ci_lo, r.ci_hi] for v, (ber, r) in sorted(s.points.items(), reverse=True)]
             for eng, s in rep.scans.items()}
    return rep.rows(), {"voltage_scans": scans}


RUNNERS = {"sweep": cmd_sweep, "compare-fi": cmd_compare_fi, "layer-vuln": cmd_layer_vuln,
           "optype-vuln": cmd_optype_vuln, "tmr": cmd_tmr, "energy": cmd_energy}


def cmd_gen(seed: int, profile: str, out, fmt: str = "int16", n_samples: int = 200) -> tuple[Path, Path]:
    """Write a synthetic WFTM model and its self-labeled WFTD dataset."""
    cfg = from_dict({"seed": seed, "model": {"profile": profile, "format": fmt}, "dataset": {"n_samples": n_samples}})
    model = build_model(cfg)
    ds = build_dataset(cfg, model)
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    mp, dp = out / "model.wftm", out / "dataset.wftd"
    save_model(model, mp)
    save_dataset(ds, dp)
    return mp, dp


# ---------------------------------------------------------------------------


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="wfault", description="Winograd fault-tolerance experiments")
    sub = p.add_subparsers(dest="command", required=True)
    for name, text in COMMANDS.items():
        s = sub.add_parser(name, help=text, description=text)
        s.add_argument("--config", help="YAML experiment config" + (" (optional)" if name == "gen" else ""))
        s.add_argument("--seed", type=int, help="global seed (overrides config)")
        s.add_argument("--workers", type=int, help="worker processes (results do not depend on it)")
        s.add_argument("--out", help="output directory")
        s.add_argument("--format", choices=("csv", "json"), help="data file format")
        if name == "gen":
            s.add_argument("--profile", default=None, help=f"one of {sorted(PROFILES)}")
    return p


def _load(args) -> ExperimentConfig:
    if args.config is None:
        if args.command != "gen":
            raise CliError("CONFIG_MISSING", "--config is required")
        cfg = from_dict({})
    else:
        cfg = load_config(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    if args.workers is not None:
        cfg.workers = args.workers
    if args.out is not None:
        cfg.output_dir = args.out
    if args.format is not None:
        cfg.format = args.format
    if getattr(args, "profile", None):
        cfg.model.profile = args.profile
    return cfg


def run(argv=None) -> int:
    args = _parser().parse_args(argv)
    try:
        cfg = _load(args)
        out = Path(cfg.output_dir)
        out.mkdir(parents=True, exist_ok=True)
        t0 = time.perf_counter()
        model = build_model(cfg)
        ds = build_dataset(cfg, model)
        files = []
        if args.command == "gen":
            save_model(model, out / "model.wftm")
            save_dataset(ds, out / "dataset.wftd")
            files = [out / "model.wftm", out / "dataset.wftd"]
        else:
            rows, summary = RUNNERS[args.command](cfg, model, ds)
            stem = args.command.replace("-", "_")
            prov = {"schema_version": SCHEMA_VERSION, "config_hash": cfg.hash(), "seed": cfg.seed}
            files = [_write_rows(out / stem, rows, cfg.format),
                     _write_json(out / f"{stem}_summary.json", {**prov, "command": args.command, **summary})]
        manifest = {
            "schema_version": SCHEMA_VERSION, "command": args.command, "config_hash": cfg.hash(), "seed": cfg.seed,
            "derived_seeds": {k: cfg.derived_seed(k) for k in ("model", "dataset", "faults", "selection")},
            "config": cfg.to_dict(), "files": sorted(p.name for p in files),
            "versions": {"wfault": __version__, "python": platform.python_version(), "numpy": np.__version__,
                         "scipy": scipy.__version__},
            "timings": {"wall_seconds": round(time.perf_counter() - t0, 3)},
        }
        _write_json(out / f"manifest_{args.command.replace('-', '_')}.json", manifest)
        print(json.dumps({"ok": True, "command": args.command, "files": [str(p) for p in files]}))
        return 0
    except (ConfigError, CliError) as e:
        return _fail(e.code, str(e), 2)
    except FormatError as e:
        return _fail("FORMAT_ERROR", f"{type(e).__name__}: {e}", 1)
    except GoalUnreachableError as e:
        return _fail("GOAL_UNREACHABLE", str(e), 1)
    except InfeasibleBudgetError as e:
        return _fail("INFEASIBLE_BUDGET", str(e), 1)
    except FileNotFoundError as e:
        return _fail("FILE_NOT_FOUND", str(e), 1)


def _fail(code: str, message: str, status: int) -> int:
    print(json.dumps({"error": {"code": code, "message": message}}), file=sys.stderr)
    return status


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
