"""Synthetic turbine-like series for smoke tests and desk-scale benchmarks.

Power is the sum of two sinusoids (a daily cycle and a slower one) plus
Gaussian noise.  The weather channels are noisy observations of the
underlying components, so future power is predictable from past features
and the calendar, but never exactly.
"""

from __future__ import annotations

import csv
from datetime import datetime, timedelta
from pathlib import Path

import numpy as np

FEATURES = ("wind_speed", "wind_direction", "temperature")
TARGET = "active_power"
SCHEMA = FEATURES + (TARGET,)


def seasonal_frame(
    hours: int,
    seed: int = 0,
    start: datetime = datetime(2016, 1, 1),
    noise: float = 0.05,
    slow_period: float = 57.0,
    step_minutes: int = 60,
    feature_noise: float = 1.0,
) -> tuple[list[datetime], dict[str, np.ndarray]]:
    """Timestamps and columns sampled every ``step_minutes`` for ``hours`` hours."""
    rng = np.random.default_rng(seed)
    n = hours * 60 // step_minutes
    t = np.arange(n) * (step_minutes / 60.0)
    daily = np.sin(2 * np.pi * t / 24.0 + 0.4)
    slow = np.sin(2 * np.pi * t / slow_period + 1.3)
    power = 0.55 + 0.25 * daily + 0.15 * slow + noise * rng.standard_normal(n)
    k = feature_noise
    columns = {
        "wind_speed": 7.0 + 2.5 * daily + 1.5 * slow + k * 0.4 * rng.standard_normal(n),
        "wind_direction": 180.0 + 40.0 * np.cos(2 * np.pi * t / slow_period + 1.3) + k * 8.0 * rng.standard_normal(n),
        "temperature": 12.0 + 4.0 * np.cos(2 * np.pi * t / 24.0 + 0.4) + k * 0.6 * rng.standard_normal(n),
        TARGET: 2000.0 * power,
    }
    stamps = [start + timedelta(minutes=step_minutes * i) for i in range(n)]
    return stamps, columns


def write_csv(path, stamps, columns, drop_fraction: float = 0.0, seed: int = 0) -> Path:
    """Write a raw CSV; ``drop_fraction`` of cells are blanked to exercise imputation."""
    rng = np.random.default_rng(seed + 7919)
    names = list(columns)
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["timestamp", *names])
        for i, ts in enumerate(stamps):
            row = [ts.isoformat()]
            for name in names:
                cell = "" if drop_fraction and rng.random() < drop_fraction else repr(float(columns[name][i]))
                row.append(cell)
            writer.writerow(row)
    return path


def write_seasonal_csv(path, hours: int, seed: int = 0, **kwargs) -> Path:
    drop = kwargs.pop("drop_fraction", 0.0)
    stamps, columns = seasonal_frame(hours, seed=seed, **kwargs)
    return write_csv(path, stamps, columns, drop_fraction=drop, seed=seed)
