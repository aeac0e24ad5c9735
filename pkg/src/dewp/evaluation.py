"""Forecast metrics, rolling-origin evaluation and the Linear baseline harness.

Metrics are averaged over all points and computed in normalized units.
MAPE and MSPE divide by ``max(|y|, floor)`` so zero targets stay finite.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from datetime import datetime
from pathlib import Path

import numpy as np

from .baseline import LinearBaseline, LinearConfig
from .data import HOUR, HourlySeries, NormalizationStats, denormalize_target
from .errors import ConfigError, ContractError, DataFormatError, DimensionError, PlanningError
from .training import TrainConfig, TrainingData, train

DEFAULT_FLOOR = 1e-3
REPORT_FORMAT = "dewp-metrics/1"


def _pair(y, yhat) -> tuple[np.ndarray, np.ndarray]:
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    yhat = np.asarray(yhat, dtype=np.float64).reshape(-1)
    if y.shape != yhat.shape:
        raise DimensionError(f"length mismatch: {y.size} targets vs {yhat.size} predictions")
    if y.size == 0:
        raise DimensionError("metrics need at least one point")
    return y, yhat


def mae(y, yhat) -> float:
    y, yhat = _pair(y, yhat)
    return float(np.mean(np.abs(y - yhat)))


def mse(y, yhat) -> float:
    y, yhat = _pair(y, yhat)
    return float(np.mean((y - yhat) ** 2))


def mape(y, yhat, floor: float = DEFAULT_FLOOR) -> float:
    y, yhat = _pair(y, yhat)
    return float(np.mean(np.abs(y - yhat) / np.maximum(np.abs(y), floor)))


def mspe(y, yhat, floor: float = DEFAULT_FLOOR) -> float:
    y, yhat = _pair(y, yhat)
    return float(np.mean((y - yhat) ** 2 / np.maximum(np.abs(y), floor)))


# ----------------------------------------------------------------------
# rolling plan


@dataclass(frozen=True)
class RollingPlan:
    """Forecast origins ``start, start + interval, ...`` whose windows end by ``end`` (exclusive)."""

    start: datetime
    end: datetime
    H: int
    interval: int | None = None

    def __post_init__(self):
        if self.H < 1:
            raise ConfigError(f"eval horizon must be >= 1, got {self.H}")
        if self.interval is not None and self.interval < 1:
            raise ConfigError(f"eval.interval must be >= 1, got {self.interval}")
        if self.end < self.start:
            raise ConfigError(f"plan end {self.end} precedes start {self.start}")

    @property
    def step(self) -> int:
        return self.H if self.interval is None else self.interval

    def origins(self) -> list[datetime]:
        out = []
        t = self.start
        while t + self.H * HOUR <= self.end:
            out.append(t)
            t += self.step * HOUR
        return out

    @classmethod
    def covering(cls, series: HourlySeries, H: int, interval: int | None = None) -> "RollingPlan":
        return cls(series.start, series.end, H, interval)


# ----------------------------------------------------------------------
# report


@dataclass
class OriginRow:
    origin: datetime
    predictions: np.ndarray
    targets: np.ndarray


@dataclass
class MetricsReport:
    mae: float
    mape: float
    mspe: float
    mse: float
    n_points: int
    floor: float
    rows: list[OriginRow] = field(default_factory=list)
    mae_raw: float | None = None

    def aggregates(self) -> dict:
        return {
            "mae": self.mae,
            "mape": self.mape,
            "mspe": self.mspe,
            "mse": self.mse,
            "n_points": self.n_points,
            "floor": self.floor,
            "mae_raw": self.mae_raw,
        }

    def check_consistency(self, stats: NormalizationStats | None = None, target: str | None = None) -> None:
        """Raise ContractError unless the aggregates match a recomputation from the rows."""
        again = summarize(self.rows, self.floor, stats, target)
        if stats is None:
            again.mae_raw = self.mae_raw
        if again.aggregates() != self.aggregates():
            raise ContractError(f"report aggregates {self.aggregates()} disagree with rows {again.aggregates()}")


def summarize(rows: list[OriginRow], floor: float = DEFAULT_FLOOR, stats=None, target=None) -> MetricsReport:
    if not rows:
        raise PlanningError("evaluation plan produced no forecast origins")
    y = np.concatenate([r.targets for r in rows])
    yhat = np.concatenate([r.predictions for r in rows])
    raw = None
    if stats is not None and target is not None:
        raw = mae(denormalize_target(y, stats, target), denormalize_target(yhat, stats, target))
    return MetricsReport(mae(y, yhat), mape(y, yhat, floor), mspe(y, yhat, floor), mse(y, yhat), int(y.size), floor, list(rows), raw)


def rolling_evaluate(
    model,
    series: HourlySeries,
    plan: RollingPlan,
    stats: NormalizationStats | None = None,
    floor: float = DEFAULT_FLOOR,
) -> MetricsReport:
    """Forecast every origin of ``plan`` from observed lookback features.

    ``series`` is normalized and must contain the ``L`` hours before the first
    origin as well as every forecast window.  Each origin is run as its own
    batch of one so results match single-origin prediction exactly.
    """
    L = model.lookback
    if plan.H != model.horizon:
        raise ConfigError(f"plan horizon {plan.H} differs from model horizon {model.horizon}")
    origins = plan.origins()
    if not origins:
        raise PlanningError(f"no origin fits between {plan.start} and {plan.end} with horizon {plan.H}")
    first = series.index_of(origins[0])
    if first < L:
        raise PlanningError(f"first origin {origins[0]} needs {L} hours of history, series provides {max(first, 0)}")
    last_end = series.index_of(origins[-1]) + plan.H
    if last_end > series.n_hours:
        raise PlanningError(f"plan needs data up to {origins[-1] + plan.H * HOUR}, series ends at {series.end}")
    features, target, calendar = series.features, series.target, series.calendar()
    rows = []
    for origin in origins:
        i = series.index_of(origin)
        pred = model.predict(features[None, :, i - L : i], calendar[None, i - L : i])[0]
        rows.append(OriginRow(origin, pred, target[i : i + plan.H].copy()))
    return summarize(rows, floor, stats, series.target_name if stats is not None else None)


def write_metrics_report(path, report: MetricsReport, header: dict | None = None) -> None:
    """JSON lines: a header, one line per origin, then a footer of aggregates.

    The aggregates are checked against the rows before anything is written.
    """
    again = summarize(report.rows, report.floor)
    for key in ("mae", "mape", "mspe", "mse", "n_points"):
        if getattr(again, key) != getattr(report, key):
            raise ContractError(f"report {key} does not match its rows")
    lines = [{"type": "header", "format": REPORT_FORMAT, **(header or {})}]
    for r in report.rows:
        lines.append(
            {
                "type": "origin",
                "origin": r.origin.isoformat(),
                "predictions": [float(v) for v in r.predictions],
                "targets": [float(v) for v in r.targets],
            }
        )
    lines.append({"type": "footer", **report.aggregates()})
    with Path(path).open("w", encoding="utf-8") as fh:
        for line in lines:
            fh.write(json.dumps(line, sort_keys=True) + "\n")


def read_metrics_report(path) -> tuple[MetricsReport, dict]:
    lines = [json.loads(s) for s in Path(path).read_text(encoding="utf-8").splitlines() if s.strip()]
    if len(lines) < 2 or lines[0].get("type") != "header" or lines[-1].get("type") != "footer":
        raise DataFormatError(f"{path}: not a metrics report (missing header or footer)")
    header = {k: v for k, v in lines[0].items() if k != "type"}
    rows = [
        OriginRow(datetime.fromisoformat(l["origin"]), np.array(l["predictions"]), np.array(l["targets"]))
        for l in lines[1:-1]
    ]
    foot = lines[-1]
    report = MetricsReport(
        foot["mae"], foot["mape"], foot["mspe"], foot["mse"], foot["n_points"], foot["floor"], rows, foot.get("mae_raw")
    )
    return report, header


# ----------------------------------------------------------------------
# Linear baseline


def linear_baseline_train(data: TrainingData, cfg: TrainConfig, hidden: int = 64):
    """Fit the two-layer baseline with the same Adam and early-stopping loop as DEWP."""
    _, d, L = data.train.features.shape
    H = data.train.target.shape[1]
    model = LinearBaseline(LinearConfig(d, L, H, hidden), seed=cfg.seed)
    return train(model, data, cfg)


def linear_baseline_predict(model: LinearBaseline, series: HourlySeries, plan: RollingPlan, stats=None) -> MetricsReport:
    return rolling_evaluate(model, series, plan, stats)
