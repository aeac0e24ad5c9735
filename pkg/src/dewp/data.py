"""Turbine CSV ingestion, hourly aggregation, imputation, scaling and windowing.

The pipeline order is fixed: load raw records, average them onto a dense
hourly grid, split at a timestamp, fit statistics on the training part,
fill gaps with training means, min-max scale, then cut sliding windows
separately inside each split.  Statistics always carry the split they were
fitted on and the transforms refuse anything but the training split.
"""

from __future__ import annotations

import csv
import hashlib
import logging
import math
import warnings
from dataclasses import dataclass, field
from datetime import datetime, timedelta, timezone
from pathlib import Path
from typing import Sequence

import numpy as np

from . import serialization
from .errors import (
    ConfigError,
    ContractError,
    DataError,
    DataFormatError,
    SchemaError,
)

log = logging.getLogger(__name__)

HOUR = timedelta(hours=1)
TRAIN_SPLIT = "train"
DEFAULT_BOUNDARY = datetime(2016, 7, 1)
BUNDLE_KIND = "dewp-dataset"
MISSING_TOKENS = {"", "nan", "na", "n/a", "null", "none", "-"}


@dataclass(frozen=True)
class RawRecord:
    timestamp: datetime
    values: dict[str, float | None]


class RecordList(list):
    """Records in timestamp order; ``duplicates`` counts overwritten rows."""

    duplicates: int = 0


@dataclass(frozen=True)
class TimeFeatures:
    month_index: int
    weekday_index: int
    hour_index: int

    def __post_init__(self):
        if not (0 <= self.month_index < 12 and 0 <= self.weekday_index < 7 and 0 <= self.hour_index < 24):
            raise ContractError(f"calendar index out of range: {self}")


@dataclass
class HourlySeries:
    """``matrix[i, t]`` is variable ``variables[i]`` during hour ``start + t``.

    Missing cells are NaN until :func:`impute_missing` has run.
    """

    start: datetime
    variables: tuple[str, ...]
    matrix: np.ndarray
    target_name: str

    def __post_init__(self):
        self.variables = tuple(self.variables)
        self.matrix = np.asarray(self.matrix, dtype=np.float64)
        if self.matrix.ndim != 2 or self.matrix.shape[0] != len(self.variables):
            raise ContractError(
                f"matrix shape {self.matrix.shape} does not match {len(self.variables)} variables"
            )
        if self.target_name not in self.variables:
            raise ConfigError(f"target {self.target_name!r} is not one of {self.variables}")
        if self.start != floor_hour(self.start):
            raise ContractError(f"series start {self.start} is not on an hour boundary")

    @property
    def n_hours(self) -> int:
        return self.matrix.shape[1]

    @property
    def end(self) -> datetime:
        """Exclusive end: the hour after the last column."""
        return self.start + self.n_hours * HOUR

    @property
    def feature_names(self) -> tuple[str, ...]:
        return tuple(v for v in self.variables if v != self.target_name)

    @property
    def features(self) -> np.ndarray:
        keep = [i for i, v in enumerate(self.variables) if v != self.target_name]
        return self.matrix[keep]

    @property
    def target(self) -> np.ndarray:
        return self.matrix[self.variables.index(self.target_name)]

    def timestamp(self, t: int) -> datetime:
        return self.start + t * HOUR

    def timestamps(self) -> list[datetime]:
        return [self.start + t * HOUR for t in range(self.n_hours)]

    def index_of(self, ts: datetime) -> int:
        """Column offset of ``ts`` (may fall outside ``[0, n_hours]``)."""
        delta = ts - self.start
        if delta % HOUR:
            raise ContractError(f"{ts} is not on the hourly grid of the series")
        return delta // HOUR

    def slice_hours(self, a: int, b: int) -> "HourlySeries":
        return HourlySeries(self.start + a * HOUR, self.variables, self.matrix[:, a:b].copy(), self.target_name)

    def with_matrix(self, matrix: np.ndarray) -> "HourlySeries":
        return HourlySeries(self.start, self.variables, matrix, self.target_name)

    def calendar(self) -> np.ndarray:
        """``(T, 3)`` integer array of month, weekday and hour indices."""
        return calendar_indices(self.timestamps())


@dataclass(frozen=True)
class NormalizationStats:
    variables: tuple[str, ...]
    min: np.ndarray
    max: np.ndarray
    mean: np.ndarray
    fitted_on: str = TRAIN_SPLIT

    def __post_init__(self):
        if np.any(self.max < self.min):
            raise ContractError("normalization max below min")

    def index(self, name: str) -> int:
        try:
            return self.variables.index(name)
        except ValueError:
            raise ConfigError(f"variable {name!r} is not covered by the normalization stats") from None

    def rows_for(self, variables: Sequence[str]) -> list[int]:
        return [self.index(v) for v in variables]

    def digest(self) -> str:
        h = hashlib.sha256()
        h.update("\x1f".join(self.variables).encode())
        h.update(self.fitted_on.encode())
        for arr in (self.min, self.max, self.mean):
            h.update(np.ascontiguousarray(arr, dtype="<f8").tobytes())
        return h.hexdigest()

    def to_parts(self, prefix: str = "stats") -> tuple[dict, dict[str, np.ndarray]]:
        meta = {"variables": list(self.variables), "fitted_on": self.fitted_on}
        arrays = {f"{prefix}.min": self.min, f"{prefix}.max": self.max, f"{prefix}.mean": self.mean}
        return meta, arrays

    @classmethod
    def from_parts(cls, meta: dict, arrays: dict[str, np.ndarray], prefix: str = "stats"):
        return cls(
            tuple(meta["variables"]),
            arrays[f"{prefix}.min"],
            arrays[f"{prefix}.max"],
            arrays[f"{prefix}.mean"],
            meta["fitted_on"],
        )


@dataclass
class WindowSample:
    """Lookback features (no power), their calendar indices, and the power target."""

    lookback: np.ndarray  # (d, L)
    calendar: np.ndarray  # (L, 3) int
    target: np.ndarray  # (H,)
    origin: datetime  # timestamp of the first target hour

    @property
    def time_features(self) -> list[TimeFeatures]:
        return [TimeFeatures(*map(int, row)) for row in self.calendar]


@dataclass
class WindowBatch:
    features: np.ndarray  # (N, d, L)
    calendar: np.ndarray  # (N, L, 3)
    target: np.ndarray  # (N, H)
    origins: list[datetime] = field(default_factory=list)

    def __len__(self):
        return self.features.shape[0]

    def subset(self, index) -> "WindowBatch":
        idx = np.asarray(index)
        return WindowBatch(
            self.features[idx],
            self.calendar[idx],
            self.target[idx],
            [self.origins[i] for i in idx] if self.origins else [],
        )


# ----------------------------------------------------------------------
# loading


def floor_hour(ts: datetime) -> datetime:
    return ts.replace(minute=0, second=0, microsecond=0)


def parse_timestamp(text: str) -> datetime:
    """ISO 8601 to a naive UTC datetime; offsets are converted, not dropped."""
    s = text.strip()
    if s.endswith(("Z", "z")):
        s = s[:-1] + "+00:00"
    ts = datetime.fromisoformat(s)
    if ts.tzinfo is not None:
        ts = ts.astimezone(timezone.utc).replace(tzinfo=None)
    return ts


def _parse_cell(cell: str) -> float | None:
    if cell is None or cell.strip().lower() in MISSING_TOKENS:
        return None
    try:
        value = float(cell)
    except ValueError:
        return None
    return value if math.isfinite(value) else None


def load_csv(
    path, schema: Sequence[str], timestamp_column: str = "timestamp"
) -> RecordList:
    """Read a comma-separated UTF-8 file into records sorted by timestamp.

    Extra columns are ignored; unparseable numbers become missing.  When a
    timestamp repeats, the row appearing later in the file wins.
    """
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header:
            raise DataFormatError(f"{path}: empty file")
        header = [h.strip() for h in header]
        if timestamp_column not in header:
            raise DataFormatError(f"{path}:1: no {timestamp_column!r} column in header")
        for name in schema:
            if name not in header:
                raise SchemaError(f"{path}:1: missing column {name!r}")
        ts_col = header.index(timestamp_column)
        cols = [header.index(name) for name in schema]

        by_time: dict[datetime, RawRecord] = {}
        duplicates = 0
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            try:
                ts = parse_timestamp(row[ts_col])
            except (ValueError, IndexError):
                raise DataFormatError(f"{path}:{lineno}: bad timestamp {row[ts_col:ts_col + 1]}") from None
            values = {name: _parse_cell(row[c]) if c < len(row) else None for name, c in zip(schema, cols)}
            if ts in by_time:
                duplicates += 1
            by_time[ts] = RawRecord(ts, values)

    if not by_time:
        raise DataFormatError(f"{path}: no data rows")
    records = RecordList(by_time[ts] for ts in sorted(by_time))
    records.duplicates = duplicates
    if duplicates:
        log.warning("%s: %d duplicate timestamps, later rows kept", path, duplicates)
    return records


def aggregate_hourly(records: Sequence[RawRecord], target: str | None = None) -> HourlySeries:
    """Average the available points of each hour onto a dense hourly grid.

    Variables keep the order of the first record; ``target`` defaults to
    the last of them.  Hours without any point stay NaN.
    """
    if not records:
        raise DataError("cannot aggregate an empty record list")
    variables = tuple(records[0].values)
    target = variables[-1] if target is None else target
    first = floor_hour(min(r.timestamp for r in records))
    last = floor_hour(max(r.timestamp for r in records))
    n_hours = (last - first) // HOUR + 1

    slots = np.array([(floor_hour(r.timestamp) - first) // HOUR for r in records], dtype=np.intp)
    values = np.array(
        [[np.nan if r.values.get(v) is None else r.values[v] for v in variables] for r in records],
        dtype=np.float64,
    ).reshape(len(records), len(variables))
    present = ~np.isnan(values)
    sums = np.zeros((n_hours, len(variables)))
    counts = np.zeros((n_hours, len(variables)))
    np.add.at(sums, slots, np.where(present, values, 0.0))
    np.add.at(counts, slots, present.astype(np.float64))
    with np.errstate(invalid="ignore", divide="ignore"):
        means = np.where(counts > 0, sums / counts, np.nan)
    return HourlySeries(first, variables, means.T.copy(), target)


# ----------------------------------------------------------------------
# statistics and transforms


def fit_normalization(train_slice: HourlySeries, split: str = TRAIN_SPLIT) -> NormalizationStats:
    """Per-variable min, max and mean over the available cells of a slice."""
    m = train_slice.matrix
    if m.shape[1] == 0:
        raise DataError("cannot fit normalization on an empty slice")
    empty = [v for v, row in zip(train_slice.variables, m) if np.isnan(row).all()]
    if empty:
        raise DataError(f"no observed values for {empty} in the fitting slice")
    lo, hi, mean = np.nanmin(m, axis=1), np.nanmax(m, axis=1), np.nanmean(m, axis=1)
    constant = [v for v, a, b in zip(train_slice.variables, lo, hi) if a == b]
    if constant:
        log.info("constant variables %s will scale to 0.5", constant)
    return NormalizationStats(train_slice.variables, lo, hi, mean, split)


def _require_train(stats: NormalizationStats):
    if stats.fitted_on != TRAIN_SPLIT:
        raise ContractError(f"statistics fitted on {stats.fitted_on!r}; only training stats may be applied")


def impute_missing(series: HourlySeries, stats: NormalizationStats) -> HourlySeries:
    """Fill NaN cells with the training mean of their variable."""
    _require_train(stats)
    rows = stats.rows_for(series.variables)
    fill = stats.mean[rows][:, None]
    return series.with_matrix(np.where(np.isnan(series.matrix), fill, series.matrix))


def scale_values(values: np.ndarray, lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
    span = hi - lo
    constant = span == 0
    safe = np.where(constant, 1.0, span)
    return np.where(constant, 0.5, (values - lo) / safe)


def unscale_values(values: np.ndarray, lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
    return values * (hi - lo) + lo


def apply_normalization(series: HourlySeries, stats: NormalizationStats) -> HourlySeries:
    """Min-max scale every variable; constant variables map to 0.5."""
    _require_train(stats)
    rows = stats.rows_for(series.variables)
    lo, hi = stats.min[rows][:, None], stats.max[rows][:, None]
    return series.with_matrix(scale_values(series.matrix, lo, hi))


def invert_normalization(series: HourlySeries, stats: NormalizationStats) -> HourlySeries:
    rows = stats.rows_for(series.variables)
    lo, hi = stats.min[rows][:, None], stats.max[rows][:, None]
    return series.with_matrix(unscale_values(series.matrix, lo, hi))


def denormalize_target(values: np.ndarray, stats: NormalizationStats, target: str) -> np.ndarray:
    i = stats.index(target)
    return unscale_values(np.asarray(values, dtype=np.float64), stats.min[i], stats.max[i])


# ----------------------------------------------------------------------
# calendar, windows, splits


def time_features_of(ts: datetime) -> TimeFeatures:
    return TimeFeatures(ts.month - 1, ts.weekday(), ts.hour)


def calendar_indices(timestamps: Sequence[datetime]) -> np.ndarray:
    return np.array(
        [(ts.month - 1, ts.weekday(), ts.hour) for ts in timestamps], dtype=np.int64
    ).reshape(len(timestamps), 3)


def window_count(T: int, L: int, H: int, stride: int) -> int:
    return 0 if T < L + H else (T - L - H) // stride + 1


def _check_window_args(L: int, H: int, stride: int):
    if L < 1 or H < 1 or stride < 1:
        raise ConfigError(f"window sizes must be positive (L={L}, H={H}, stride={stride})")


def window_arrays(series: HourlySeries, L: int, H: int, stride: int = 1) -> WindowBatch:
    """Stacked equivalent of :func:`make_windows`, built with strided views."""
    _check_window_args(L, H, stride)
    T = series.n_hours
    n = window_count(T, L, H, stride)
    d = len(series.feature_names)
    if n == 0:
        warnings.warn(f"series of {T} hours is shorter than L + H = {L + H}; no windows", stacklevel=2)
        return WindowBatch(np.zeros((0, d, L)), np.zeros((0, L, 3), dtype=np.int64), np.zeros((0, H)), [])
    starts = np.arange(n) * stride
    feats = np.lib.stride_tricks.sliding_window_view(series.features, L, axis=1)
    feats = feats[:, starts].transpose(1, 0, 2).copy()
    cal = np.lib.stride_tricks.sliding_window_view(series.calendar(), L, axis=0)
    cal = cal[starts].transpose(0, 2, 1).copy()
    tgt = np.lib.stride_tricks.sliding_window_view(series.target, H)[starts + L].copy()
    origins = [series.timestamp(int(s) + L) for s in starts]
    return WindowBatch(feats, cal, tgt, origins)


def make_windows(series: HourlySeries, L: int, H: int, stride: int = 1) -> list[WindowSample]:
    batch = window_arrays(series, L, H, stride)
    return [
        WindowSample(batch.features[i], batch.calendar[i], batch.target[i], batch.origins[i])
        for i in range(len(batch))
    ]


def stack_windows(windows: Sequence[WindowSample]) -> WindowBatch:
    return WindowBatch(
        np.stack([w.lookback for w in windows]),
        np.stack([w.calendar for w in windows]),
        np.stack([w.target for w in windows]),
        [w.origin for w in windows],
    )


def split_by_timestamp(series: HourlySeries, boundary: datetime) -> tuple[HourlySeries, HourlySeries]:
    """Hours strictly before ``boundary`` go to train, the rest to test."""
    if not (series.start <= boundary <= series.end):
        raise ConfigError(f"split boundary {boundary} outside series range [{series.start}, {series.end}]")
    cut = series.index_of(boundary)
    return series.slice_hours(0, cut), series.slice_hours(cut, series.n_hours)


def chronological_holdout(batch: WindowBatch, fraction: float = 0.1) -> tuple[WindowBatch, WindowBatch]:
    """Split off the final ``fraction`` of windows (at least one) for validation."""
    n = len(batch)
    if n < 2:
        raise DataError(f"need at least 2 windows for a validation holdout, have {n}")
    n_val = min(n - 1, max(1, int(round(n * fraction))))
    idx = np.arange(n)
    return batch.subset(idx[: n - n_val]), batch.subset(idx[n - n_val :])


# ----------------------------------------------------------------------
# preprocessing bundle


@dataclass
class DatasetBundle:
    """Imputed, normalized hourly series plus the training statistics."""

    series: HourlySeries
    stats: NormalizationStats
    boundary: datetime
    info: dict = field(default_factory=dict)

    @property
    def boundary_index(self) -> int:
        return self.series.index_of(self.boundary)

    def train_series(self) -> HourlySeries:
        return self.series.slice_hours(0, self.boundary_index)

    def test_series(self) -> HourlySeries:
        return self.series.slice_hours(self.boundary_index, self.series.n_hours)


def preprocess(records: Sequence[RawRecord], target: str | None, boundary: datetime) -> DatasetBundle:
    hourly = aggregate_hourly(records, target)
    train, test = split_by_timestamp(hourly, boundary)
    stats = fit_normalization(train)
    parts = [apply_normalization(impute_missing(part, stats), stats) for part in (train, test)]
    full = hourly.with_matrix(np.concatenate([p.matrix for p in parts], axis=1))
    info = {
        "records": len(records),
        "duplicates": int(getattr(records, "duplicates", 0)),
        "hours": hourly.n_hours,
        "missing_cells": int(np.isnan(hourly.matrix).sum()),
        "train_hours": train.n_hours,
        "test_hours": test.n_hours,
    }
    return DatasetBundle(full, stats, boundary, info)


def save_bundle(path, bundle: DatasetBundle, extra_meta: dict | None = None) -> str:
    s = bundle.series
    stats_meta, stats_arrays = bundle.stats.to_parts()
    meta = {
        "start": s.start.isoformat(),
        "variables": list(s.variables),
        "target": s.target_name,
        "boundary": bundle.boundary.isoformat(),
        "stats": stats_meta,
        "info": bundle.info,
        **(extra_meta or {}),
    }
    return serialization.write_file(path, BUNDLE_KIND, meta, {"series": s.matrix, **stats_arrays})


def load_bundle(path) -> DatasetBundle:
    meta, arrays = serialization.read_file(path, BUNDLE_KIND)
    series = HourlySeries(
        datetime.fromisoformat(meta["start"]), tuple(meta["variables"]), arrays["series"], meta["target"]
    )
    stats = NormalizationStats.from_parts(meta["stats"], arrays)
    return DatasetBundle(series, stats, datetime.fromisoformat(meta["boundary"]), meta.get("info", {}))
