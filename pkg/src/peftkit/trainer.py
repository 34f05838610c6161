"""Desk-scale training harness for LoRA, AdaLoRA and QLoRA runs.

A hidden "teacher" attention model defines the task. The student starts
from the teacher's weights plus a low-rank drift on the Q/K/V projections,
so adapters on those projections can in principle undo it. Optimization
is plain SGD on mean squared error (plus the orthogonality penalty for
AdaLoRA).
"""

from __future__ import annotations

import dataclasses
import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .adalora import (
    AdaLoraAdapter,
    BudgetSchedule,
    budget_at,
    lambda_sgd_step,
    orthogonality_penalty,
    penalty_gradients,
)
from .errors import ConfigError, TrainingError
from .layers import Linear
from .linalg import DTYPE
from .lora import attach_adapters
from .model import PROJECTIONS, AdapterizedModel
from .qlora import QuantizedLinear
from .quantize import MODES, quantize, storage_report

ADAPTER_KINDS = ("none", "lora", "adalora")
QUANTIZATIONS = ("none", "int8", "int4", "nf4")


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    d_model: int = 16
    d_k: int = 8
    seq_len: int = 4
    n_examples: int = 256
    adapter: str = "lora"
    targets: tuple = ("q", "k", "v")
    r: int = 4
    sigma: float = 0.02
    gamma: float = 0.1
    eta: float = 1e-3
    steps: int = 500
    b_init: int | None = None
    b_final: int | None = None
    warmup_steps: int = 0
    quantization: str = "none"
    quant_mode: str = "symmetric"
    block_size: int = 64
    double_quant: bool = False
    super_block: int = 256
    batch_size: int = 32
    head_trainable: bool = False
    drift: float = 0.5
    drift_rank: int = 2

    def __post_init__(self):
        object.__setattr__(self, "targets", tuple(str(t).lower() for t in self.targets))
        self.validate()

    def validate(self) -> None:
        for name in ("d_model", "d_k", "seq_len", "block_size", "super_block"):
            if getattr(self, name) < 1:
                raise ConfigError(name, "must be >= 1")
        if self.n_examples < 2:
            raise ConfigError("n_examples", "must be >= 2 (80/20 split)")
        if self.steps < 0:
            raise ConfigError("steps", "must be >= 0")
        if self.batch_size < 0:
            raise ConfigError("batch_size", "must be >= 0 (0 means full batch)")
        if not self.eta > 0:
            raise ConfigError("eta", "must be > 0")
        if self.adapter not in ADAPTER_KINDS:
            raise ConfigError("adapter", f"must be one of {list(ADAPTER_KINDS)}")
        if self.quantization not in QUANTIZATIONS:
            raise ConfigError("quantization", f"must be one of {list(QUANTIZATIONS)}")
        if self.quant_mode not in MODES:
            raise ConfigError("quant_mode", f"must be one of {list(MODES)}")
        for i, t in enumerate(self.targets):
            if t not in PROJECTIONS:
                raise ConfigError(f"targets[{i}]", f"unknown projection {t!r}")
        if self.adapter != "none":
            if not 1 <= self.r <= min(self.d_model, self.d_k):
                raise ConfigError("r", f"must be in [1, min(d_model, d_k) = {min(self.d_model, self.d_k)}]")
            if not self.sigma > 0:
                raise ConfigError("sigma", "must be > 0")
        if self.gamma < 0:
            raise ConfigError("gamma", "must be >= 0")
        if self.drift < 0:
            raise ConfigError("drift", "must be >= 0")
        if not 1 <= self.drift_rank <= min(self.d_model, self.d_k):
            raise ConfigError("drift_rank", "must be in [1, min(d_model, d_k)]")
        if self.adapter == "adalora":
            b_init, b_final = self.budget_bounds()
            if b_final < 0 or b_final > b_init:
                raise ConfigError("b_final", f"must be in [0, b_init={b_init}]")
            if not 0 <= self.warmup_steps <= self.steps:
                raise ConfigError("warmup_steps", f"must be in [0, steps={self.steps}]")

    def budget_bounds(self) -> tuple[int, int]:
        b_init = self.r if self.b_init is None else self.b_init
        b_final = b_init if self.b_final is None else self.b_final
        return b_init, b_final

    def schedule(self) -> BudgetSchedule:
        b_init, b_final = self.budget_bounds()
        return BudgetSchedule(b_init, b_final, self.steps, self.warmup_steps)

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        if not isinstance(data, dict):
            raise ConfigError("$", "config must be a JSON object")
        known = {f.name: f for f in dataclasses.fields(cls)}
        for key in data:
            if key not in known:
                raise ConfigError(key, "unknown field")
        for key, value in data.items():
            _check_type(key, value, known[key])
        return cls(**data)

    @classmethod
    def from_json(cls, path) -> "RunConfig":
        try:
            data = json.loads(Path(path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError("$", f"invalid JSON ({exc.msg} at line {exc.lineno})") from None
        return cls.from_dict(data)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["targets"] = list(self.targets)
        return d


def _check_type(key: str, value, f: dataclasses.Field) -> None:
    default = f.default
    if key in ("b_init", "b_final"):
        ok = value is None or (isinstance(value, int) and not isinstance(value, bool))
    elif key == "targets":
        ok = isinstance(value, list) and all(isinstance(t, str) for t in value)
        if not ok:
            raise ConfigError(key, "must be a list of projection names")
        return
    elif isinstance(default, bool):
        ok = isinstance(value, bool)
    elif isinstance(default, int):
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif isinstance(default, float):
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
    else:
        ok = isinstance(value, str)
    if not ok:
        raise ConfigError(key, f"wrong type {type(value).__name__}")


# ---------------------------------------------------------------- task


@dataclass
class ToyTask:
    teacher: AdapterizedModel
    train_x: np.ndarray
    train_y: np.ndarray
    val_x: np.ndarray
    val_y: np.ndarray
    seq_len: int

    @property
    def n_train(self) -> int:
        return self.train_x.shape[0] // self.seq_len

    @property
    def n_val(self) -> int:
        return self.val_x.shape[0] // self.seq_len


def make_teacher(seed: int, dims: tuple[int, int, int]) -> AdapterizedModel:
    d_model, d_k, seq_len = dims
    rng = np.random.default_rng([seed, 0])

    def draw(rows, cols):
        return (rng.standard_normal((rows, cols)) / np.sqrt(rows)).astype(DTYPE)

    embedding = draw(d_model, d_model)
    q, k, v = (Linear(draw(d_model, d_k)) for _ in PROJECTIONS)
    return AdapterizedModel(embedding, q, k, v, draw(d_k, d_model), seq_len)


def make_toy_task(seed: int, dims: tuple[int, int, int], n_examples: int = 256) -> ToyTask:
    """Random inputs labelled by a seeded teacher; 80/20 train/validation split."""
    d_model, d_k, seq_len = dims
    if min(d_model, d_k, seq_len) < 1 or n_examples < 2:
        raise ValueError("dims and n_examples must be positive")
    teacher = make_teacher(seed, dims)
    rng = np.random.default_rng([seed, 1])
    x = rng.standard_normal((n_examples * seq_len, d_model)).astype(DTYPE)
    y = teacher.forward(x)
    split = max(1, min(n_examples - 1, int(round(0.8 * n_examples)))) * seq_len
    return ToyTask(teacher, x[:split], y[:split], x[split:], y[split:], seq_len)


def _drifted(teacher: AdapterizedModel, config: RunConfig) -> AdapterizedModel:
    rng = np.random.default_rng([config.seed, 2])
    layers = {}
    for name in PROJECTIONS:
        w = teacher.projection(name).weight
        u = rng.standard_normal((w.shape[0], config.drift_rank))
        v = rng.standard_normal((config.drift_rank, w.shape[1]))
        shift = config.drift * (u @ v) / np.sqrt(w.shape[0] * config.drift_rank)
        layers[name] = Linear((w + shift).astype(DTYPE))
    return teacher.with_projections(**layers)


def _quantize_frozen(model: AdapterizedModel, config: RunConfig) -> AdapterizedModel:
    if config.quantization == "none":
        return model

    def q(w):
        return quantize(w, config.quantization, config.block_size, config.quant_mode,
                        config.double_quant, config.super_block)

    layers = {n: QuantizedLinear(q(model.projection(n).weight)) for n in PROJECTIONS}
    head = model.head if config.head_trainable else q(model.head)
    return dataclasses.replace(model, embedding=q(model.embedding), head=head, **layers)


def build_model(config: RunConfig, task: ToyTask | None = None) -> AdapterizedModel:
    """Student model: drifted teacher, optionally quantized, with fresh adapters."""
    teacher = task.teacher if task is not None else make_teacher(config.seed, (config.d_model, config.d_k, config.seq_len))
    model = dataclasses.replace(_drifted(teacher, config), head_trainable=config.head_trainable)
    model = _quantize_frozen(model, config)
    if config.adapter != "none":
        model = attach_adapters(model, config.targets, config.r, config.sigma, [config.seed, 3],
                                kind=config.adapter, gamma=config.gamma)
    return model


# ------------------------------------------------------------ objective


def mse(y: np.ndarray, target: np.ndarray) -> float:
    return float(np.mean(np.square(y.astype(np.float64) - target)))


def penalty(model: AdapterizedModel) -> float:
    return sum(orthogonality_penalty(a) for a in model.adapters().values() if isinstance(a, AdaLoraAdapter))


def loss_and_grads(model: AdapterizedModel, x: np.ndarray, target: np.ndarray) -> tuple[float, float, dict]:
    """(task cost, regularized loss, gradients of the regularized loss)."""
    y, cache = model.forward(x, return_cache=True)
    diff = y - target
    grad_y = (diff * diff.dtype.type(2.0 / diff.size)).astype(y.dtype)
    grads = model.backward(cache, grad_y)
    for name, adapter in model.adapters().items():
        if isinstance(adapter, AdaLoraAdapter) and adapter.gamma > 0:
            for key, g in penalty_gradients(adapter).items():
                grads[f"{name}.{key}"] = grads[f"{name}.{key}"] + g
    cost = mse(y, target)
    return cost, cost + penalty(model), grads


def evaluate(model: AdapterizedModel, x: np.ndarray, target: np.ndarray) -> float:
    return mse(model.forward(x), target) + penalty(model)


# ------------------------------------------------------------- training


@dataclass
class TrainReport:
    config: dict
    loss_curve: list
    cost_curve: list
    initial_loss: float
    final_loss: float
    val_loss: float
    trainable_params: int
    total_params: int
    compression_ratio: float
    seconds_per_step: float
    budget_curve: list = field(default_factory=list)
    nonzero_lambda: list = field(default_factory=list)
    frozen_digest: str = ""
    model: AdapterizedModel | None = field(default=None, repr=False, compare=False)

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in dataclasses.fields(self) if f.name != "model"}
        return d

    def summary(self) -> str:
        lines = [
            f"adapter            {self.config['adapter']} (r={self.config['r']})",
            f"quantization       {self.config['quantization']}",
            f"steps              {len(self.loss_curve)}",
            f"initial loss       {self.initial_loss:.6g}",
            f"final loss         {self.final_loss:.6g}",
            f"validation loss    {self.val_loss:.6g}",
            f"trainable params   {self.trainable_params}",
            f"total params       {self.total_params}",
            f"frozen compression {self.compression_ratio:.3f}x",
            f"seconds / step     {self.seconds_per_step:.2e}",
        ]
        return "\n".join(lines)


def _frozen_storage_bytes(model: AdapterizedModel) -> tuple[int, int]:
    """(bytes as stored, bytes as dense float32) over all frozen weights."""
    stored = dense = 0
    weights = [model.embedding] + [model.projection(n).weight for n in PROJECTIONS]
    if not model.head_trainable:
        weights.append(model.head)
    for w in weights:
        dense += 4 * w.size
        if isinstance(w, np.ndarray):
            stored += 4 * w.size
        else:
            stored += storage_report(w)["total_bytes"]
    return stored, dense


def _sgd_update(model: AdapterizedModel, grads: dict, config: RunConfig, t: int, schedule) -> AdapterizedModel:
    eta = DTYPE(config.eta)
    layers = {}
    for name, adapter in model.adapters().items():
        if isinstance(adapter, AdaLoraAdapter):
            stepped = lambda_sgd_step(adapter, grads[f"{name}.lam"], config.eta, schedule, t)
            new = dataclasses.replace(
                stepped,
                p=(adapter.p - eta * grads[f"{name}.p"]).astype(DTYPE),
                q=(adapter.q - eta * grads[f"{name}.q"]).astype(DTYPE),
            )
        else:
            new = dataclasses.replace(
                adapter,
                a=(adapter.a - eta * grads[f"{name}.a"]).astype(DTYPE),
                b=(adapter.b - eta * grads[f"{name}.b"]).astype(DTYPE),
            )
        layers[name] = model.projection(name).with_adapter(new)
    model = model.with_projections(**layers)
    if model.head_trainable:
        model = dataclasses.replace(model, head=(model.head - eta * grads["head"]).astype(DTYPE))
    return model


def _batches(config: RunConfig, n_train: int):
    rng = np.random.default_rng([config.seed, 4])
    size = n_train if config.batch_size in (0,) or config.batch_size >= n_train else config.batch_size
    while True:
        order = np.arange(n_train) if size == n_train else rng.permutation(n_train)
        for start in range(0, n_train - size + 1, size):
            yield order[start : start + size]


def _rows(indices: np.ndarray, seq_len: int) -> np.ndarray:
    return (indices[:, None] * seq_len + np.arange(seq_len)[None, :]).ravel()


def train(config: RunConfig, task: ToyTask | None = None) -> TrainReport:
    """Run ``config.steps`` SGD steps and report the loss curve and sizes."""
    if task is None:
        task = make_toy_task(config.seed, (config.d_model, config.d_k, config.seq_len), config.n_examples)
    model = build_model(config, task)
    schedule = config.schedule() if config.adapter == "adalora" else None
    digest = model.frozen_digest()
    initial = evaluate(model, task.train_x, task.train_y)
    loss_curve, cost_curve, budgets, nonzero = [], [], [], []
    batches = _batches(config, task.n_train)
    start = time.perf_counter()
    for t in range(1, config.steps + 1):
        rows = _rows(next(batches), config.seq_len)
        cost, loss, grads = loss_and_grads(model, task.train_x[rows], task.train_y[rows])
        if not math.isfinite(loss):
            raise TrainingError(f"loss diverged at step {t} (loss={loss})")
        loss_curve.append(loss)
        cost_curve.append(cost)
        model = _sgd_update(model, grads, config, t, schedule)
        if schedule is not None:
            budgets.append(budget_at(schedule, t))
            nonzero.append({n: a.effective_rank for n, a in model.adapters().items()})
    elapsed = time.perf_counter() - start
    final = evaluate(model, task.train_x, task.train_y)
    if not math.isfinite(final):
        raise TrainingError(f"loss diverged at step {config.steps} (loss={final})")
    if model.frozen_digest() != digest:
        raise TrainingError("frozen weights changed during training")
    stored, dense = _frozen_storage_bytes(model)
    return TrainReport(
        config=config.to_dict(),
        loss_curve=loss_curve,
        cost_curve=cost_curve,
        initial_loss=initial,
        final_loss=final,
        val_loss=evaluate(model, task.val_x, task.val_y),
        trainable_params=model.n_trainable(),
        total_params=model.n_trainable() + model.n_frozen(),
        compression_ratio=dense / stored,
        seconds_per_step=elapsed / config.steps if config.steps else 0.0,
        budget_curve=budgets,
        nonzero_lambda=nonzero,
        frozen_digest=digest,
        model=model,
    )


# ----------------------------------------------------------- gradient audit

AUDIT_MAX_PARAMS = 500


def _perturbed(model: AdapterizedModel, seed: int) -> AdapterizedModel:
    # move adapters off their zero-delta init so every factor has a nonzero gradient
    rng = np.random.default_rng([seed, 5])
    layers = {}
    for name, adapter in model.adapters().items():
        if isinstance(adapter, AdaLoraAdapter):
            new = dataclasses.replace(adapter, lam=rng.uniform(0.5, 1.5, adapter.rank).astype(adapter.lam.dtype))
        else:
            new = dataclasses.replace(adapter, a=(0.3 * rng.standard_normal(adapter.a.shape)).astype(adapter.a.dtype))
        layers[name] = model.projection(name).with_adapter(new)
    return model.with_projections(**layers)


def _set_param(model: AdapterizedModel, key: str, value: np.ndarray) -> AdapterizedModel:
    if key == "head":
        return dataclasses.replace(model, head=value)
    name, factor = key.split(".")
    layer = model.projection(name)
    return model.with_projections(**{name: layer.with_adapter(dataclasses.replace(layer.adapter, **{factor: value}))})


def finite_difference_audit(config: RunConfig, epsilon: float = 1e-4) -> float:
    """Max relative error between analytic and central-difference gradients.

    Runs in float64 on a small batch. Quantized codes are constant here;
    only trainable parameters are probed.
    """
    task = make_toy_task(config.seed, (config.d_model, config.d_k, config.seq_len), max(config.n_examples, 4))
    model = _perturbed(build_model(config, task), config.seed).astype(np.float64)
    n_params = model.n_trainable()
    if n_params > AUDIT_MAX_PARAMS:
        raise ValueError(f"audit limited to {AUDIT_MAX_PARAMS} trainable parameters, config has {n_params}")
    if n_params == 0:
        return 0.0
    rows = _rows(np.arange(min(4, task.n_train)), config.seq_len)
    x = task.train_x[rows].astype(np.float64)
    target = task.train_y[rows].astype(np.float64)
    _, _, grads = loss_and_grads(model, x, target)
    worst = 0.0
    for key, value in model.parameters().items():
        analytic = np.asarray(grads[key], dtype=np.float64)
        for idx in np.ndindex(value.shape):
            plus = value.copy()
            plus[idx] += epsilon
            minus = value.copy()
            minus[idx] -= epsilon
            f_plus = evaluate(_set_param(model, key, plus), x, target)
            f_minus = evaluate(_set_param(model, key, minus), x, target)
            numeric = (f_plus - f_minus) / (2 * epsilon)
            err = relative_error(analytic[idx], numeric)
            worst = max(worst, err)
    return worst


def relative_error(a: float, b: float, floor: float = 1e-8) -> float:
    return abs(a - b) / max(abs(a), abs(b), floor)


# ------------------------------------------------------- compression table


def compression_report(config: RunConfig) -> dict:
    """Frozen-weight bytes under each precision, plus adapter parameter counts."""
    teacher = make_teacher(config.seed, (config.d_model, config.d_k, config.seq_len))
    base = dataclasses.replace(_drifted(teacher, config), head_trainable=config.head_trainable)
    adapted = base
    if config.adapter != "none":
        adapted = attach_adapters(base, config.targets, config.r, config.sigma, [config.seed, 3],
                                  kind=config.adapter, gamma=config.gamma)
    trainable = adapted.n_trainable()
    rows = []
    for precision in QUANTIZATIONS:
        model = _quantize_frozen(base, dataclasses.replace(config, quantization=precision))
        stored, dense = _frozen_storage_bytes(model)
        rows.append({
            "precision": precision if precision != "none" else "fp32",
            "bytes": stored,
            "dense_bytes": dense,
            "ratio": dense / stored,
            "trainable_params": trainable,
        })
    selected = "fp32" if config.quantization == "none" else config.quantization
    return {
        "block_size": config.block_size,
        "double_quant": config.double_quant,
        "quant_mode": config.quant_mode if config.quantization in ("int8", "int4") else None,
        "adapter": config.adapter,
        "selected": selected,
        "rows": rows,
    }


def format_compression_table(report: dict) -> str:
    header = f"{'precision':<10}{'bytes':>14}{'ratio':>10}{'trainable':>12}"
    lines = [header, "-" * len(header)]
    for row in report["rows"]:
        mark = " *" if row["precision"] == report["selected"] else ""
        lines.append(f"{row['precision']:<10}{row['bytes']:>14}{row['ratio']:>10.3f}{row['trainable_params']:>12}{mark}")
    return "\n".join(lines)
