"""Experiment configuration: a YAML tree mapped onto strict dataclasses.

Per-module seeds left as ``null`` are derived from the global seed with
``derive_key(global_seed, <module name>) mod 2**32``; see README for the names.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import yaml

from .analysis import DEFAULT_GRID
from .energy import DEFAULT_ANCHORS
from .rng import derive_key

SCHEMA_VERSION = 1


class ConfigError(ValueError):
    code = "CONFIG_INVALID"


class ConfigNotFoundError(ConfigError):
    code = "CONFIG_NOT_FOUND"


@dataclass
class ModelSection:
    source: str = "synthetic"  # synthetic | file
    path: str | None = None
    seed: int | None = None
    profile: str = "default"
    format: str = "int16"


@dataclass
class DatasetSection:
    source: str = "synthetic"  # synthetic (self-labeled) | file
    path: str | None = None
    seed: int | None = None
    n_samples: int = 200


@dataclass
class SweepSection:
    bers: list = field(default_factory=lambda: list(DEFAULT_GRID))
    engines: list = field(default_factory=lambda: ["DIRECT", "WINOGRAD"])
    modes: list = field(default_factory=lambda: ["OP_LEVEL"])
    trials: int = 5


@dataclass
class AnalysisSection:
    ber: float | str = "auto"  # a number, or "auto" for the grid point nearest target_accuracy
    target_accuracy: float = 0.5
    trials: int = 5
    engines: list = field(default_factory=lambda: ["DIRECT", "WINOGRAD"])


@dataclass
class TmrSection:
    goals: list = field(default_factory=lambda: [0.6, 0.7, 0.8, 0.9])
    delta: float = 0.1
    trials: int = 5
    selection_seed: int | None = None
    cost_mul: float = 1.0
    cost_add: float = 0.2


@dataclass
class EnergySection:
    anchors: list = field(default_factory=lambda: [list(a) for a in DEFAULT_ANCHORS])
    budgets: list = field(default_factory=lambda: [round(0.01 * i, 2) for i in range(1, 11)])
    grid_step: float = 0.005
    trials: int = 5
    p0: float = 1.0
    v0: float = 0.9
    freq_mhz: float = 667.0
    throughput_mul: float = 256.0
    throughput_add: float = 512.0
    overhead_cycles: float = 0.0


@dataclass
class ExperimentConfig:
    seed: int = 0
    fault_seed: int | None = None
    workers: int = 1
    output_dir: str = "out"
    format: str = "csv"
    include_fc: bool = True  # false confines faults to convolution layers
    model: ModelSection = field(default_factory=ModelSection)
    dataset: DatasetSection = field(default_factory=DatasetSection)
    sweep: SweepSection = field(default_factory=SweepSection)
    analysis: AnalysisSection = field(default_factory=AnalysisSection)
    tmr: TmrSection = field(default_factory=TmrSection)
    energy: EnergySection = field(default_factory=EnergySection)

    def derived_seed(self, name: str) -> int:
        explicit = {"model": self.model.seed, "dataset": self.dataset.seed, "faults": self.fault_seed,
                    "selection": self.tmr.selection_seed}.get(name)
        if explicit is not None:
            return int(explicit)
        return derive_key(self.seed, name) % 2**32

    def to_dict(self) -> dict:
        return asdict(self)

    def hash(self) -> str:
        """SHA-256 of the canonical JSON form; output paths and worker count do not affect results."""
        d = self.to_dict()
        for k in ("workers", "output_dir", "format"):
            d.pop(k)
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()


_SECTIONS = {"model": ModelSection, "dataset": DatasetSection, "sweep": SweepSection, "analysis": AnalysisSection,
             "tmr": TmrSection, "energy": EnergySection}


def _build(cls, data, where: str):
    if data is None:
        return cls()
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected a mapping, got {type(data).__name__}")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {', '.join(map(str, unknown))}")
    kw = {}
    for k, v in data.items():
        kw[k] = _build(_SECTIONS[k], v, f"{where}.{k}" if where else k) if cls is ExperimentConfig and k in _SECTIONS else v
    return cls(**kw)


def _num(v, where):
    # YAML 1.1 reads "1e-9" as a string
    try:
        return float(v)
    except (TypeError, ValueError):
        raise ConfigError(f"{where}: expected a number, got {v!r}") from None


def validate(cfg: ExperimentConfig) -> ExperimentConfig:
    def need(cond, msg):
        if not cond:
            raise ConfigError(msg)
    cfg.sweep.bers = [_num(b, "sweep.bers") for b in cfg.sweep.bers]
    cfg.tmr.goals = [_num(g, "tmr.goals") for g in cfg.tmr.goals]
    cfg.energy.budgets = [_num(b, "energy.budgets") for b in cfg.energy.budgets]
    cfg.energy.anchors = [[_num(v, "energy.anchors"), _num(b, "energy.anchors")] for v, b in cfg.energy.anchors]
    if cfg.analysis.ber != "auto":
        cfg.analysis.ber = _num(cfg.analysis.ber, "analysis.ber")
    need(cfg.model.source in ("synthetic", "file"), "model.source must be 'synthetic' or 'file'")
    need(cfg.model.source != "file" or cfg.model.path, "model.path required for file source")
    need(cfg.dataset.source in ("synthetic", "file"), "dataset.source must be 'synthetic' or 'file'")
    need(cfg.dataset.source != "file" or cfg.dataset.path, "dataset.path required for file source")
    need(cfg.model.format in ("int8", "int16"), "model.format must be int8 or int16")
    need(isinstance(cfg.dataset.n_samples, int) and cfg.dataset.n_samples > 0, "dataset.n_samples must be > 0")
    need(cfg.workers >= 1, "workers must be >= 1")
    need(cfg.format in ("csv", "json"), "format must be csv or json")
    need(isinstance(cfg.include_fc, bool), "include_fc must be true or false")
    need(len(cfg.sweep.bers) > 0, "sweep.bers must not be empty")
    need(all(0 <= float(b) <= 1 for b in cfg.sweep.bers), "sweep.bers must lie in [0, 1]")
    need(list(map(float, cfg.sweep.bers)) == sorted(map(float, cfg.sweep.bers)), "sweep.bers must be ascending")
    need(set(cfg.sweep.engines) <= {"DIRECT", "WINOGRAD"}, "sweep.engines must be DIRECT/WINOGRAD")
    need(set(cfg.sweep.modes) <= {"OP_LEVEL", "NEURON_LEVEL"}, "sweep.modes must be OP_LEVEL/NEURON_LEVEL")
    for sec in ("sweep", "analysis", "tmr", "energy"):
        need(getattr(cfg, sec).trials >= 1, f"{sec}.trials must be >= 1")
    a = cfg.analysis.ber
    need(a == "auto" or (isinstance(a, (int, float)) and 0 < a <= 1), "analysis.ber must be 'auto' or in (0, 1]")
    need(0 < cfg.tmr.delta <= 1, "tmr.delta must be in (0, 1]")
    need(cfg.tmr.cost_mul > 0 and cfg.tmr.cost_add > 0, "tmr costs must be positive")
    need(all(0 < g <= 1 for g in cfg.tmr.goals), "tmr.goals are fractions of fault-free accuracy in (0, 1]")
    need(all(0 < b <= 1 for b in cfg.energy.budgets), "energy.budgets must be in (0, 1]")
    need(cfg.energy.grid_step > 0, "energy.grid_step must be positive")
    return cfg


def from_dict(data: dict | None) -> ExperimentConfig:
    return validate(_build(ExperimentConfig, data or {}, ""))


def load_config(path) -> ExperimentConfig:
    p = Path(path)
    if not p.is_file():
        raise ConfigNotFoundError(f"config file not found: {p}")
    try:
        data = yaml.safe_load(p.read_text())
    except yaml.YAMLError as e:
        raise ConfigError(f"YAML parse error: {e}") from e
    return from_dict(data)
