"""Mini-batch Adam on the forecast MSE with validation early stopping, plus
checkpoint save/load."""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from . import serialization
from .autodiff import Tape, Tensor, backward
from .baseline import LinearBaseline, LinearConfig
from .data import HourlySeries, NormalizationStats, WindowBatch, chronological_holdout, window_arrays
from .errors import ConfigError, ConfigMismatchError, ContractError, DataError, NumericAbort
from .model import DEWP, ModelConfig, mse_loss

log = logging.getLogger(__name__)

CHECKPOINT_KIND = "dewp-checkpoint"

# model kind -> (config class, model class)
MODEL_REGISTRY = {
    DEWP.kind: (ModelConfig, DEWP),
    LinearBaseline.kind: (LinearConfig, LinearBaseline),
}


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 256
    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    max_epochs: int = 100
    patience: int = 10
    seed: int = 0
    grad_clip: float | None = None  # global L2 norm; off by default
    val_fraction: float = 0.1

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigError(f"train.batch_size must be >= 1, got {self.batch_size}")
        if not self.learning_rate > 0:
            raise ConfigError(f"train.learning_rate must be > 0, got {self.learning_rate}")
        if self.patience < 1:
            raise ConfigError(f"train.patience must be >= 1, got {self.patience}")
        if self.max_epochs < 1:
            raise ConfigError(f"train.max_epochs must be >= 1, got {self.max_epochs}")
        if self.seed < 0:
            raise ConfigError(f"train.seed must be unsigned, got {self.seed}")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ConfigError("train.beta1 and train.beta2 must lie in [0, 1)")
        if not self.eps > 0:
            raise ConfigError("train.eps must be > 0")
        if self.grad_clip is not None and not self.grad_clip > 0:
            raise ConfigError("train.grad_clip must be > 0 when set")
        if not 0.0 < self.val_fraction < 1.0:
            raise ConfigError("train.val_fraction must lie in (0, 1)")


@dataclass
class OptimizerState:
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def for_params(cls, params: dict[str, Tensor]) -> "OptimizerState":
        return cls(
            0,
            {k: np.zeros_like(p.data) for k, p in params.items()},
            {k: np.zeros_like(p.data) for k, p in params.items()},
        )


def adam_step(
    params: dict[str, Tensor], grads: dict[str, np.ndarray], state: OptimizerState, cfg: TrainConfig
) -> tuple[dict[str, Tensor], OptimizerState]:
    """One bias-corrected Adam update, applied in place."""
    if set(params) != set(state.m) or set(params) != set(state.v):
        raise ContractError("optimizer state does not cover the same parameters as the model")
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            raise ContractError(f"no gradient for parameter {name}")
        if g.shape != p.shape or state.m[name].shape != p.shape or state.v[name].shape != p.shape:
            raise ContractError(f"shape mismatch for {name}: param {p.shape}, grad {g.shape}, state {state.m[name].shape}")
    state.t += 1
    c1 = 1.0 - cfg.beta1**state.t
    c2 = 1.0 - cfg.beta2**state.t
    for name, p in params.items():
        g = grads[name]
        m = cfg.beta1 * state.m[name] + (1 - cfg.beta1) * g
        v = cfg.beta2 * state.v[name] + (1 - cfg.beta2) * g * g
        state.m[name], state.v[name] = m, v
        p.data = p.data - cfg.learning_rate * (m / c1) / (np.sqrt(v / c2) + cfg.eps)
    return params, state


# ----------------------------------------------------------------------
# training data


@dataclass
class TrainingData:
    train: WindowBatch
    val: WindowBatch


def training_data(series: HourlySeries, L: int, H: int, stride: int = 1, val_fraction: float = 0.1) -> TrainingData:
    """All windows of ``series`` with the final ``val_fraction`` held out for validation."""
    batch = window_arrays(series, L, H, stride)
    train, val = chronological_holdout(batch, val_fraction)
    return TrainingData(train, val)


# ----------------------------------------------------------------------
# reports


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    train_mse: float
    val_mse: float
    seconds: float


@dataclass
class TrainReport:
    epochs: list[EpochRecord]
    best_epoch: int
    stop_reason: str
    initial_train_mse: float
    initial_val_mse: float

    @property
    def best_val_mse(self) -> float:
        return min(r.val_mse for r in self.epochs)

    @property
    def best_train_mse(self) -> float:
        return next(r.train_mse for r in self.epochs if r.epoch == self.best_epoch)

    def timing_free(self) -> tuple:
        """Everything except wall-clock times, for determinism comparisons."""
        return (
            tuple((r.epoch, r.train_mse, r.val_mse) for r in self.epochs),
            self.best_epoch,
            self.stop_reason,
            self.initial_train_mse,
            self.initial_val_mse,
        )


REPORT_COLUMNS = ("epoch", "train_mse", "val_mse", "seconds")


def write_train_report(path, report: TrainReport, meta: dict | None = None) -> None:
    """CSV with ``# key=value`` preamble lines, then one row per epoch."""
    preamble = {
        "best_epoch": report.best_epoch,
        "stop_reason": report.stop_reason,
        "initial_train_mse": repr(report.initial_train_mse),
        "initial_val_mse": repr(report.initial_val_mse),
        **(meta or {}),
    }
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        for key, value in preamble.items():
            fh.write(f"# {key}={value}\n")
        writer = csv.writer(fh)
        writer.writerow(REPORT_COLUMNS)
        for r in report.epochs:
            writer.writerow([r.epoch, repr(r.train_mse), repr(r.val_mse), f"{r.seconds:.3f}"])


def read_train_report(path) -> tuple[TrainReport, dict]:
    meta: dict[str, str] = {}
    rows = []
    with Path(path).open(encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    body = []
    for line in lines:
        if line.startswith("# "):
            key, _, value = line[2:].partition("=")
            meta[key] = value
        else:
            body.append(line)
    reader = csv.DictReader(body)
    for row in reader:
        rows.append(EpochRecord(int(row["epoch"]), float(row["train_mse"]), float(row["val_mse"]), float(row["seconds"])))
    report = TrainReport(
        rows,
        int(meta.pop("best_epoch")),
        meta.pop("stop_reason"),
        float(meta.pop("initial_train_mse")),
        float(meta.pop("initial_val_mse")),
    )
    return report, meta


# ----------------------------------------------------------------------
# the loop


def _first_nonfinite(named: dict[str, np.ndarray]) -> str | None:
    for name, a in named.items():
        if not np.all(np.isfinite(a)):
            return name
    return None


def evaluate_mse(model, batch: WindowBatch, batch_size: int = 256) -> float:
    """Mean squared error over all windows and horizon steps."""
    total = 0.0
    with np.errstate(over="ignore", invalid="ignore"):
        for a in range(0, len(batch), batch_size):
            sl = slice(a, a + batch_size)
            pred = model.predict(batch.features[sl], batch.calendar[sl])
            total += float(np.sum((pred - batch.target[sl]) ** 2))
    return total / batch.target.size


def _clip(grads: dict[str, np.ndarray], limit: float) -> dict[str, np.ndarray]:
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if norm <= limit:
        return grads
    scale = limit / norm
    return {k: g * scale for k, g in grads.items()}


def _largest_parameter(params: dict[str, Tensor]) -> str:
    name = max(params, key=lambda k: float(np.max(np.abs(params[k].data), initial=0.0)))
    return f"{name} (max |value| {float(np.max(np.abs(params[name].data))):.3g})"


def gradient_step(model, features, calendar, target, state: OptimizerState, cfg: TrainConfig) -> float:
    """Forward, backward and one Adam update on a single mini-batch; returns the batch loss."""
    params = model.params
    # overflow is detected explicitly below, so numpy's warnings are noise here
    with np.errstate(over="ignore", invalid="ignore"):
        with Tape() as tape:
            loss = mse_loss(model.forward(features, calendar), Tensor(target))
        value = loss.item()
        if not math.isfinite(value):
            bad = _first_nonfinite({k: p.data for k, p in params.items()})
            where = f"first non-finite parameter: {bad}" if bad else f"all parameters finite, largest is {_largest_parameter(params)}"
            raise NumericAbort(f"non-finite loss {value} at update {state.t + 1}; {where}")
        backward(loss, tape)
    grads = {k: p.grad for k, p in params.items()}
    bad = _first_nonfinite(grads)
    if bad is not None:
        bad_param = _first_nonfinite({k: p.data for k, p in params.items()})
        if bad_param is not None:
            raise NumericAbort(f"parameter {bad_param} is non-finite (first non-finite gradient: {bad})")
        raise NumericAbort(f"non-finite gradient for parameter {bad}")
    if cfg.grad_clip is not None:
        grads = _clip(grads, cfg.grad_clip)
    adam_step(params, grads, state, cfg)
    bad = _first_nonfinite({k: p.data for k, p in params.items()})
    if bad is not None:
        raise NumericAbort(f"parameter {bad} became non-finite after update {state.t}")
    return value


def train(model, data: TrainingData, cfg: TrainConfig, state: OptimizerState | None = None):
    """Train ``model`` in place and return ``(model, TrainReport)``.

    Windows are reshuffled every epoch from a generator seeded with
    ``cfg.seed``; the final partial batch is kept.  After ``cfg.patience``
    epochs without a strictly lower validation MSE training stops and the
    best epoch's parameters are restored.  ``state`` is updated in place if
    given.
    """
    if len(data.train) == 0 or len(data.val) == 0:
        raise DataError(f"need nonempty train and validation windows, have {len(data.train)} and {len(data.val)}")
    bad = _first_nonfinite({k: p.data for k, p in model.params.items()})
    if bad is not None:
        raise NumericAbort(f"parameter {bad} is non-finite before training")
    if state is None:
        state = OptimizerState.for_params(model.params)
    rng = np.random.default_rng(cfg.seed)
    n = len(data.train)

    initial_train = evaluate_mse(model, data.train, cfg.batch_size)
    initial_val = evaluate_mse(model, data.val, cfg.batch_size)
    if not (math.isfinite(initial_train) and math.isfinite(initial_val)):
        raise NumericAbort("non-finite loss at initialization")

    records: list[EpochRecord] = []
    best_val, best_epoch = math.inf, 0
    best_params = {k: p.data.copy() for k, p in model.params.items()}
    stale = 0
    stop_reason = "max_epochs"
    for epoch in range(1, cfg.max_epochs + 1):
        t0 = time.perf_counter()
        order = rng.permutation(n)
        weighted = 0.0
        for a in range(0, n, cfg.batch_size):
            idx = order[a : a + cfg.batch_size]
            loss = gradient_step(
                model, data.train.features[idx], data.train.calendar[idx], data.train.target[idx], state, cfg
            )
            weighted += loss * idx.size
        train_mse = weighted / n
        val_mse = evaluate_mse(model, data.val, cfg.batch_size)
        if not math.isfinite(val_mse):
            raise NumericAbort(f"non-finite validation loss at epoch {epoch}")
        records.append(EpochRecord(epoch, train_mse, val_mse, time.perf_counter() - t0))
        log.info("epoch %d train_mse=%.6g val_mse=%.6g", epoch, train_mse, val_mse)
        if val_mse < best_val:
            best_val, best_epoch, stale = val_mse, epoch, 0
            best_params = {k: p.data.copy() for k, p in model.params.items()}
        else:
            stale += 1
            if stale >= cfg.patience:
                stop_reason = "patience"
                break

    for k, p in model.params.items():
        p.data = best_params[k]
    report = TrainReport(records, best_epoch, stop_reason, initial_train, initial_val)
    return model, report


# ----------------------------------------------------------------------
# checkpoints


@dataclass
class Checkpoint:
    model: object
    optimizer: OptimizerState
    stats: NormalizationStats | None
    meta: dict


def save_checkpoint(model, optimizer: OptimizerState, path, stats: NormalizationStats | None = None, extra_meta: dict | None = None) -> str:
    """Write model, optimizer state and (optionally) normalization stats; return the file digest."""
    names = list(model.params)
    meta = {
        "model_kind": model.kind,
        "model_config": model.config.to_dict(),
        "param_names": names,
        "optimizer_t": optimizer.t,
        **(extra_meta or {}),
    }
    arrays = {f"param/{k}": model.params[k].data for k in names}
    arrays.update({f"adam.m/{k}": optimizer.m[k] for k in names})
    arrays.update({f"adam.v/{k}": optimizer.v[k] for k in names})
    if stats is not None:
        stats_meta, stats_arrays = stats.to_parts()
        meta["stats"] = stats_meta
        arrays.update(stats_arrays)
    return serialization.write_file(path, CHECKPOINT_KIND, meta, arrays)


def config_from_dict(kind: str, values: dict):
    if kind not in MODEL_REGISTRY:
        raise ConfigError(f"unknown model kind {kind!r}; known: {sorted(MODEL_REGISTRY)}")
    cls = MODEL_REGISTRY[kind][0]
    known = {f.name for f in fields(cls)}
    unknown = set(values) - known
    if unknown:
        raise ConfigError(f"unknown {kind} config keys: {sorted(unknown)}")
    return cls(**values)


def load_checkpoint(path, expected_config=None) -> Checkpoint:
    """Read a checkpoint written by :func:`save_checkpoint`.

    If ``expected_config`` is given, the stored model config must equal it,
    otherwise :class:`ConfigMismatchError` is raised before any model is built.
    """
    meta, arrays = serialization.read_file(path, CHECKPOINT_KIND)
    kind = meta["model_kind"]
    config = config_from_dict(kind, meta["model_config"])
    if expected_config is not None and expected_config != config:
        ours, theirs = expected_config.to_dict(), config.to_dict()
        diff = sorted(k for k in set(ours) | set(theirs) if ours.get(k) != theirs.get(k))
        raise ConfigMismatchError(f"checkpoint config differs in {diff}: stored {[theirs.get(k) for k in diff]}, expected {[ours.get(k) for k in diff]}")
    names = meta["param_names"]
    params = {k: Tensor(arrays[f"param/{k}"], grad_enabled=True) for k in names}
    model_cls = MODEL_REGISTRY[kind][1]
    model = model_cls(config, params=params)
    optimizer = OptimizerState(
        int(meta["optimizer_t"]),
        {k: arrays[f"adam.m/{k}"] for k in names},
        {k: arrays[f"adam.v/{k}"] for k in names},
    )
    stats = NormalizationStats.from_parts(meta["stats"], arrays) if "stats" in meta else None
    return Checkpoint(model, optimizer, stats, meta)
