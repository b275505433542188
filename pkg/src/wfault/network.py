"""Layer graphs, the synthetic benchmark generator, and fault-aware inference."""
from __future__ import annotations

import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from enum import Enum

import numpy as np
from scipy.stats import binomtest

from . import batched
from .conv import (ConvSpec, Engine, IneligibleSpecError, ShapeMismatchError, conv_layout, direct_conv, fc_forward,
                   fc_layout, winograd_conv)
from .faults import FaultConfig, FaultHook, FaultMode, neuron_masks
from .fxp import INT8, INT16, DatapathSpec, FxpFormat, FxpTensor, flip_word, quantize
from .rng import derive_key


class LayerKind(str, Enum):
    CONV = "CONV"
    FC = "FC"
    RELU = "RELU"
    MAXPOOL2 = "MAXPOOL2"
    FLATTEN = "FLATTEN"


class Provenance(str, Enum):
    SELF_LABELED = "SELF_LABELED"
    EXTERNAL = "EXTERNAL"


@dataclass(frozen=True)
class LayerSpec:
    kind: LayerKind
    conv: ConvSpec | None = None
    n_in: int = 0
    n_out: int = 0
    engine: Engine = Engine.DIRECT

    @property
    def weighted(self) -> bool:
        return self.kind in (LayerKind.CONV, LayerKind.FC)


@dataclass
class Model:
    name: str
    layers: list[LayerSpec]
    weights: dict[int, FxpTensor]
    fmt: FxpFormat
    input_shape: tuple[int, int, int]
    num_classes: int
    dp: DatapathSpec | None = None
    seed: int = 0

    def __post_init__(self):
        if self.dp is None:
            self.dp = DatapathSpec.for_format(self.fmt)
        validate_model(self)

    @property
    def weighted_layers(self) -> list[int]:
        return [i for i, l in enumerate(self.layers) if l.weighted]

    def layout(self, i: int):
        l = self.layers[i]
        if l.kind == LayerKind.CONV:
            return conv_layout(l.conv, l.engine, self.fmt.word_bits, self.dp)
        if l.kind == LayerKind.FC:
            return fc_layout(l.n_in, l.n_out, self.fmt.word_bits, self.dp)
        raise ValueError(f"layer {i} ({l.kind}) has no op sites")

    def with_engine(self, engine: Engine | str) -> "Model":
        engine = Engine(engine)
        layers = [replace(l, engine=engine) if l.kind == LayerKind.CONV and
                  (engine == Engine.DIRECT or l.conv.winograd_eligible) else l for l in self.layers]
        return replace(self, layers=layers)

    @property
    def engine_tag(self) -> str:
        return Engine.WINOGRAD.value if any(l.engine == Engine.WINOGRAD for l in self.layers
                                             if l.kind == LayerKind.CONV) else Engine.DIRECT.value


def validate_model(model: Model):
    shape = tuple(model.input_shape)
    for i, l in enumerate(model.layers):
        if l.kind == LayerKind.CONV:
            s = l.conv
            if shape != (s.in_channels, s.height, s.width):
                raise ShapeMismatchError(f"layer {i}: expects {(s.in_channels, s.height, s.width)}, got {shape}")
            if l.engine == Engine.WINOGRAD and not s.winograd_eligible:
                raise IneligibleSpecError(f"layer {i} is not winograd eligible")
            if model.weights[i].shape != (s.out_channels, s.in_channels, s.kernel, s.kernel):
                raise ShapeMismatchError(f"layer {i}: weight shape {model.weights[i].shape}")
            shape = (s.out_channels, s.out_h, s.out_w)
        elif l.kind == LayerKind.FC:
            if int(np.prod(shape)) != l.n_in:
                raise ShapeMismatchError(f"layer {i}: expects {l.n_in} inputs, got {shape}")
            if model.weights[i].shape != (l.n_out, l.n_in):
                raise ShapeMismatchError(f"layer {i}: weight shape {model.weights[i].shape}")
            shape = (l.n_out,)
        elif l.kind == LayerKind.MAXPOOL2:
            if len(shape) != 3 or shape[1] % 2 or shape[2] % 2:
                raise ShapeMismatchError(f"layer {i}: maxpool needs even spatial dims, got {shape}")
            shape = (shape[0], shape[1] // 2, shape[2] // 2)
        elif l.kind == LayerKind.FLATTEN:
            shape = (int(np.prod(shape)),)
    if shape != (model.num_classes,):
        raise ShapeMismatchError(f"model output shape {shape} != ({model.num_classes},)")


@dataclass
class Dataset:
    inputs: FxpTensor  # (N, C, H, W)
    labels: np.ndarray
    num_classes: int
    provenance: Provenance = Provenance.SELF_LABELED

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.labels) != self.inputs.shape[0]:
            raise ValueError("label count does not match sample count")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError("labels outside [0, num_classes)")

    def __len__(self):
        return len(self.labels)

    def subset(self, n: int) -> "Dataset":
        return Dataset(FxpTensor(self.inputs.data[:n], self.inputs.fmt), self.labels[:n], self.num_classes,
                       self.provenance)


# ---------------------------------------------------------------------------
# synthetic benchmark

PROFILES = {
    # (input shape, [("conv", out_channels) | ("pool",) | ("fc", n_out)], classes)
    "default": ((3, 16, 16), [("conv", 8), ("conv", 16), ("pool",), ("conv", 16), ("conv", 32), ("pool",),
                              ("fc", 64), ("fc", 10)], 10),
    "small": ((1, 8, 8), [("conv", 4), ("pool",), ("conv", 8), ("pool",), ("fc", 10)], 10),
    "single": ((2, 4, 4), [("conv", 1)], None),
}

FORMATS = {"int8": INT8, "int16": INT16}


def build_layers(input_shape, template) -> list[LayerSpec]:
    layers = []
    c, h, w = input_shape
    flat = None
    for j, item in enumerate(template):
        if item[0] == "conv":
            spec = ConvSpec(c, item[1], h, w, padding=1)
            layers.append(LayerSpec(LayerKind.CONV, conv=spec))
            c = item[1]
            last = j == len(template) - 1
            if not last:
                layers.append(LayerSpec(LayerKind.RELU))
        elif item[0] == "pool":
            layers.append(LayerSpec(LayerKind.MAXPOOL2))
            h, w = h // 2, w // 2
        elif item[0] == "fc":
            if flat is None:
                layers.append(LayerSpec(LayerKind.FLATTEN))
                flat = c * h * w
            layers.append(LayerSpec(LayerKind.FC, n_in=flat, n_out=item[1]))
            flat = item[1]
            if j != len(template) - 1:
                layers.append(LayerSpec(LayerKind.RELU))
    if template[-1][0] == "conv":
        layers.append(LayerSpec(LayerKind.FLATTEN))
    return layers


def generate_synthetic_model(seed: int, profile: str = "default", fmt: FxpFormat | str = "int16",
                             engine: Engine | str = Engine.DIRECT, dp: DatapathSpec | None = None) -> Model:
    """Seeded He-uniform weights quantised to ``fmt``; deterministic for a seed."""
    fmt = FORMATS[fmt] if isinstance(fmt, str) else fmt
    input_shape, template, classes = PROFILES[profile]
    layers = build_layers(input_shape, template)
    if classes is None:
        last = layers[-2] if layers[-1].kind == LayerKind.FLATTEN else layers[-1]
        classes = last.conv.out_channels * last.conv.out_h * last.conv.out_w
    rng = np.random.default_rng(derive_key("weights", seed, profile))
    weights = {}
    for i, l in enumerate(layers):
        if l.kind == LayerKind.CONV:
            shape = (l.conv.out_channels, l.conv.in_channels, 3, 3)
        elif l.kind == LayerKind.FC:
            shape = (l.n_out, l.n_in)
        else:
            continue
        fan_in = int(np.prod(shape[1:]))
        lim = np.sqrt(6.0 / fan_in)
        weights[i] = quantize(rng.uniform(-lim, lim, size=shape), fmt)
    model = Model(f"synthetic-{profile}", layers, weights, fmt, tuple(input_shape), classes, dp, seed)
    if layers[-1].kind == LayerKind.FC:
        _balance_head(model, seed)
    return model.with_engine(engine)


def _balance_head(model: Model, seed: int, n_cal: int = 256):
    """Make every class row of the last FC layer orthogonal to the mean penultimate feature.

    Random ReLU nets otherwise send almost every input to one class, which makes
    self-labelled accuracy curves uninformative.
    """
    last = model.weighted_layers[-1]
    n_in = model.layers[last].n_in
    head = Model(model.name, model.layers[:last], {k: v for k, v in model.weights.items() if k < last}, model.fmt,
                 model.input_shape, n_in, model.dp, seed)
    cal = synthetic_inputs(derive_key("calibration", seed), n_cal, model.input_shape, model.fmt)
    mu = forward(head, cal.data, [FaultConfig()] * n_cal).mean(axis=0)
    w = model.weights[last].dequantize()
    if mu @ mu > 0:
        w = w - np.outer(w @ mu / (mu @ mu), mu)
    model.weights[last] = quantize(w, model.fmt)


def synthetic_inputs(seed: int, n: int, shape, fmt: FxpFormat) -> FxpTensor:
    rng = np.random.default_rng(derive_key("inputs", seed, n))
    return quantize(rng.uniform(0.0, 1.0, size=(n, *shape)), fmt)


# ---------------------------------------------------------------------------
# inference


def _relu(x):
    return np.maximum(x, 0)


def _maxpool2(x):
    B, C, H, W = x.shape
    return x.reshape(B, C, H // 2, 2, W // 2, 2).max(axis=(3, 5))


def forward(model: Model, x: np.ndarray, cfgs: list[FaultConfig]) -> np.ndarray:
    """Batched forward pass; ``cfgs[b]`` fixes the fault universe of inference ``b``."""
    x = np.asarray(x, dtype=np.int64)
    if x.shape[1:] != tuple(model.input_shape):
        raise ShapeMismatchError(f"input shape {x.shape[1:]} != {model.input_shape}")
    tag = model.engine_tag
    op_level = any(c.mode == FaultMode.OP_LEVEL and c.ber > 0 for c in cfgs)
    neuron = any(c.mode == FaultMode.NEURON_LEVEL and c.ber > 0 for c in cfgs)
    for i, l in enumerate(model.layers):
        if l.weighted:
            lay = model.layout(i)
            faults = batched.gather_faults(cfgs, i, lay) if op_level else _no_faults(lay)
            w = model.weights[i].data
            if l.kind == LayerKind.FC:
                x = batched.fc_batch(x, w, model.fmt, lay, faults)
            elif l.engine == Engine.WINOGRAD:
                x = batched.winograd_conv_batch(x, w, l.conv, model.fmt, lay, faults)
            else:
                x = batched.direct_conv_batch(x, w, l.conv, model.fmt, lay, faults)
            if neuron:
                x = _inject_neurons_batch(x, cfgs, i, model.fmt.word_bits, tag)
        elif l.kind == LayerKind.RELU:
            x = _relu(x)
        elif l.kind == LayerKind.MAXPOOL2:
            x = _maxpool2(x)
        elif l.kind == LayerKind.FLATTEN:
            x = x.reshape(x.shape[0], -1)
    return x.reshape(x.shape[0], -1)


_EMPTY = np.zeros(0, dtype=np.int64)


def _no_faults(layout):
    return {(s.kind, s.name): batched.StageFaults(_EMPTY, _EMPTY, _EMPTY) for s in layout.stages}


def _inject_neurons_batch(x, cfgs, layer_id, width, tag):
    flat = x.reshape(x.shape[0], -1).copy()
    for b, cfg in enumerate(cfgs):
        sites, masks = neuron_masks(cfg, layer_id, flat.shape[1], width, tag)
        if len(sites):
            flat[b, sites] = flip_word(flat[b, sites], masks, width)
    return flat.reshape(x.shape)


def infer(model: Model, inp: FxpTensor | np.ndarray, cfg: FaultConfig | None = None) -> np.ndarray:
    """Logits (raw words) for a single input."""
    data = inp.data if isinstance(inp, FxpTensor) else np.asarray(inp)
    return forward(model, data[None], [cfg or FaultConfig()])[0]


def infer_reference(model: Model, inp: FxpTensor, cfg: FaultConfig | None = None) -> tuple[np.ndarray, list]:
    """Slow scalar inference through the hooked reference engines; returns (logits, hooks)."""
    cfg = cfg or FaultConfig()
    x = inp
    hooks = []
    for i, l in enumerate(model.layers):
        if l.weighted:
            hook = FaultHook(cfg)
            hooks.append(hook)
            w = model.weights[i]
            if l.kind == LayerKind.FC:
                x = fc_forward(FxpTensor(x.data.reshape(-1), x.fmt), w, hook, layer_id=i, dp=model.dp)
            elif l.engine == Engine.WINOGRAD:
                x = winograd_conv(x, w, l.conv, hook, layer_id=i, dp=model.dp)
            else:
                x = direct_conv(x, w, l.conv, hook, layer_id=i, dp=model.dp)
            if cfg.mode == FaultMode.NEURON_LEVEL:
                flat = _inject_neurons_batch(x.data[None], [cfg], i, model.fmt.word_bits, model.engine_tag)[0]
                x = FxpTensor(flat, x.fmt)
        elif l.kind == LayerKind.RELU:
            x = FxpTensor(_relu(x.data), x.fmt)
        elif l.kind == LayerKind.MAXPOOL2:
            x = FxpTensor(_maxpool2(x.data[None])[0], x.fmt)
        elif l.kind == LayerKind.FLATTEN:
            x = FxpTensor(x.data.reshape(-1), x.fmt)
    return x.data.reshape(-1), hooks


def self_label(model: Model, inputs: FxpTensor, batch: int = 128) -> Dataset:
    """Label each input with the fault-free DIRECT-engine argmax."""
    ref = model.with_engine(Engine.DIRECT)
    labels = []
    for lo in range(0, inputs.shape[0], batch):
        xb = inputs.data[lo:lo + batch]
        labels.append(np.argmax(forward(ref, xb, [FaultConfig()] * len(xb)), axis=1))
    return Dataset(inputs, np.concatenate(labels), model.num_classes, Provenance.SELF_LABELED)


# ---------------------------------------------------------------------------
# accuracy evaluation


@dataclass(frozen=True)
class AccuracyResult:
    accuracy: float
    correct: int
    total: int
    ci_lo: float
    ci_hi: float
    trials: int
    per_trial_correct: tuple[int, ...] = field(default=())
    seed: int = 0

    @property
    def ci_half(self) -> float:
        return (self.ci_hi - self.ci_lo) / 2


def wilson(correct: int, total: int) -> tuple[float, float]:
    if total == 0:
        return 0.0, 1.0
    ci = binomtest(correct, total).proportion_ci(confidence_level=0.95, method="wilson")
    return float(max(0.0, ci.low)), float(min(1.0, ci.high))


def trial_id(sample: int, trial: int) -> int:
    return (trial << 32) | sample


def _eval_chunk(args):
    model, inputs, labels, cfg, pairs = args
    idx = pairs[:, 0]
    cfgs = [cfg.for_trial(trial_id(int(i), int(t))) for i, t in pairs]
    pred = np.argmax(forward(model, inputs[idx], cfgs), axis=1)
    hit = pred == labels[idx]
    trials = pairs[:, 1]
    return np.bincount(trials[hit], minlength=int(trials.max()) + 1 if len(trials) else 0)


_POOL_STATE = {}


def _pool_init(model, inputs, labels):
    _POOL_STATE.update(model=model, inputs=inputs, labels=labels)


def _pool_chunk(args):
    cfg, pairs = args
    s = _POOL_STATE
    return _eval_chunk((s["model"], s["inputs"], s["labels"], cfg, pairs))


def _faulty(cfg: FaultConfig) -> bool:
    return cfg.mode != FaultMode.NONE and cfg.ber > 0


def evaluate_accuracy(model: Model, dataset: Dataset, cfg: FaultConfig, trials: int = 5, *, workers: int = 1,
                      batch: int = 50) -> AccuracyResult:
    """Top-1 accuracy over samples x trials; each (sample, trial) gets its own trial_id."""
    if trials < 1:
        raise ValueError("trials must be >= 1")
    N = len(dataset)
    inputs, labels = dataset.inputs.data, dataset.labels
    n_trials_run = trials if _faulty(cfg) else 1
    pairs = np.array([(i, t) for t in range(n_trials_run) for i in range(N)], dtype=np.int64).reshape(-1, 2)
    chunks = [pairs[lo:lo + batch] for lo in range(0, len(pairs), batch)]
    per_trial = np.zeros(n_trials_run, dtype=np.int64)
    if workers > 1 and len(chunks) > 1:
        with ProcessPoolExecutor(max_workers=workers, initializer=_pool_init,
                                 initargs=(model, inputs, labels)) as ex:
            for counts in ex.map(_pool_chunk, [(cfg, c) for c in chunks]):
                per_trial[:len(counts)] += counts
    else:
        for c in chunks:
            counts = _eval_chunk((model, inputs, labels, cfg, c))
            per_trial[:len(counts)] += counts
    if n_trials_run == 1 and trials > 1:
        per_trial = np.repeat(per_trial, trials)
    correct = int(per_trial.sum())
    total = N * trials
    lo, hi = wilson(correct, total)
    return AccuracyResult(correct / total if total else 0.0, correct, total, lo, hi, trials,
                          tuple(int(v) for v in per_trial), cfg.seed)


def default_workers() -> int:
    return max(1, min(4, os.cpu_count() or 1))
