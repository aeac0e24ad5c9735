"""Command-line entry point: ``dewp <command> ...``.

Commands: preprocess, train, evaluate, predict, sweep, plus ``synth`` for
writing a synthetic turbine-like CSV.  Exit codes are 0 on success, 2 for
configuration errors, 3 for data/file errors and 4 for numeric aborts.
"""

from __future__ import annotations

import argparse
import csv
import itertools
import json
import logging
import os
import sys
from datetime import datetime
from pathlib import Path

import numpy as np

from . import __version__, serialization
from .baseline import LinearBaseline
from .config import RunConfig, load_config, parse_value, split_key
from .data import (
    HOUR,
    apply_normalization,
    aggregate_hourly,
    denormalize_target,
    impute_missing,
    load_bundle,
    load_csv,
    parse_timestamp,
    preprocess,
    save_bundle,
    window_count,
)
from .errors import CompatibilityError, ConfigError, DataError, DewpError, NumericAbort, PlanningError
from .evaluation import read_metrics_report, rolling_evaluate, write_metrics_report
from .model import DEWP
from .synthetic import write_seasonal_csv
from .training import OptimizerState, load_checkpoint, save_checkpoint, train, training_data, write_train_report

log = logging.getLogger("dewp")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
FORECAST_COLUMNS = ("timestamp", "predicted_power_normalized", "predicted_power_raw")


def provenance(cfg: RunConfig) -> dict:
    return {"tool_version": __version__, "config_digest": cfg.digest(), "config": cfg.to_dict()}


def csv_columns(path, timestamp_column: str) -> list[str]:
    try:
        with Path(path).open(newline="", encoding="utf-8") as fh:
            header = next(csv.reader(fh), [])
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from None
    return [h.strip() for h in header if h.strip() and h.strip() != timestamp_column]


def read_records(path, cfg: RunConfig, variables=None):
    data = cfg.section("data")
    schema = list(variables or data["variables"] or csv_columns(path, data["timestamp_column"]))
    if data["target"] not in schema:
        schema.append(data["target"])
    return load_csv(path, schema, data["timestamp_column"])


def build_model(cfg: RunConfig, d: int):
    model_cfg = cfg.model_config(d)
    seed = cfg["train.seed"]
    return LinearBaseline(model_cfg, seed=seed) if cfg["model.kind"] == "linear" else DEWP(model_cfg, seed=seed)


# ----------------------------------------------------------------------
# commands


def cmd_preprocess(raw_csv, out, cfg: RunConfig) -> str:
    records = read_records(raw_csv, cfg)
    bundle = preprocess(records, cfg["data.target"], cfg["data.boundary"])
    digest = save_bundle(out, bundle, provenance(cfg))
    L, H, stride = cfg["model.L"], cfg["model.H"], cfg["data.stride"]
    info = bundle.info
    print(f"records: {info['records']} (duplicates dropped: {info['duplicates']})")
    print(f"hours: {info['hours']} (train {info['train_hours']}, test {info['test_hours']}), missing cells: {info['missing_cells']}")
    print(f"train windows (L={L}, H={H}, stride={stride}): {window_count(info['train_hours'], L, H, stride)}")
    print(f"bundle: {out}\ndigest: {digest}")
    return digest


def train_on_bundle(bundle, cfg: RunConfig):
    tcfg = cfg.train_config()
    L, H = cfg["model.L"], cfg["model.H"]
    data = training_data(bundle.train_series(), L, H, cfg["data.stride"], tcfg.val_fraction)
    model = build_model(cfg, len(bundle.series.feature_names))
    state = OptimizerState.for_params(model.params)
    model, report = train(model, data, tcfg, state)
    return model, state, data, report


def cmd_train(bundle_path, out, cfg: RunConfig, report_path=None) -> str:
    bundle = load_bundle(bundle_path)
    model, state, data, report = train_on_bundle(bundle, cfg)
    meta = {
        **provenance(cfg),
        "target": bundle.series.target_name,
        "bundle_digest": serialization.file_digest(bundle_path),
        "stats_digest": bundle.stats.digest(),
    }
    digest = save_checkpoint(model, state, out, bundle.stats, meta)
    report_path = Path(report_path) if report_path else Path(str(out) + ".train.csv")
    write_train_report(report_path, report, {"tool_version": __version__, "config_digest": cfg.digest()})
    print(f"windows: train {len(data.train)}, validation {len(data.val)}")
    print(f"best epoch {report.best_epoch} of {len(report.epochs)} ({report.stop_reason}), val_mse {report.best_val_mse:.6g}")
    print(f"checkpoint: {out}\ndigest: {digest}\nreport: {report_path}")
    return digest


def evaluate_checkpoint(bundle, checkpoint, cfg: RunConfig):
    if checkpoint.stats is None or checkpoint.stats.digest() != bundle.stats.digest():
        raise CompatibilityError(
            "checkpoint normalization stats do not match the bundle's "
            f"({checkpoint.meta.get('stats_digest', 'none')} vs {bundle.stats.digest()})"
        )
    plan = cfg.plan(bundle.boundary, bundle.series.end)
    if plan.H != checkpoint.model.horizon:
        raise ConfigError(f"model.H={plan.H} but the checkpoint forecasts {checkpoint.model.horizon} steps")
    return rolling_evaluate(checkpoint.model, bundle.series, plan, bundle.stats, cfg["eval.floor"]), plan


def cmd_evaluate(bundle_path, checkpoint_path, out, cfg: RunConfig):
    bundle = load_bundle(bundle_path)
    checkpoint = load_checkpoint(checkpoint_path)
    report, plan = evaluate_checkpoint(bundle, checkpoint, cfg)
    header = {
        **provenance(cfg),
        "checkpoint_digest": serialization.file_digest(checkpoint_path),
        "stats_digest": bundle.stats.digest(),
        "model_kind": checkpoint.model.kind,
        "plan": {"start": plan.start.isoformat(), "end": plan.end.isoformat(), "H": plan.H, "interval": plan.step},
    }
    write_metrics_report(out, report, header)
    again, _ = read_metrics_report(out)
    again.check_consistency()
    print(f"origins: {len(report.rows)}, points: {report.n_points}")
    print(f"mae {report.mae:.6g}  mape {report.mape:.6g}  mspe {report.mspe:.6g}  mse {report.mse:.6g}  mae_raw {report.mae_raw:.6g}")
    print(f"report: {out}")
    return report


def cmd_predict(checkpoint_path, recent_csv, origin: datetime, out, cfg: RunConfig):
    checkpoint = load_checkpoint(checkpoint_path)
    stats, model = checkpoint.stats, checkpoint.model
    if stats is None:
        raise CompatibilityError(f"{checkpoint_path} carries no normalization stats")
    target = checkpoint.meta["target"]
    records = read_records(recent_csv, cfg, variables=stats.variables)
    series = aggregate_hourly(records, target)
    if tuple(series.variables) != tuple(stats.variables):
        raise CompatibilityError(f"CSV variables {series.variables} differ from training {stats.variables}")
    series = apply_normalization(impute_missing(series, stats), stats)
    L, H = model.lookback, model.horizon
    if (origin - series.start) % HOUR:
        raise PlanningError(f"origin {origin} is not on the hourly grid")
    i = series.index_of(origin)
    if i < L or i > series.n_hours:
        have = min(max(i, 0), series.n_hours)
        raise PlanningError(f"origin {origin} needs {L} hours of history before it, {recent_csv} provides {have}")
    pred = model.predict(series.features[None, :, i - L : i], series.calendar()[None, i - L : i])[0]
    raw = denormalize_target(pred, stats, target)
    with Path(out).open("w", newline="", encoding="utf-8") as fh:
        fh.write(f"# tool_version={__version__}\n# config_digest={checkpoint.meta.get('config_digest', '')}\n")
        writer = csv.writer(fh)
        writer.writerow(FORECAST_COLUMNS)
        for h in range(H):
            writer.writerow([(origin + h * HOUR).isoformat(), repr(float(pred[h])), repr(float(raw[h]))])
    print(f"forecast: {out} ({H} rows from {origin.isoformat()})")
    return pred


def read_forecast(path) -> list[tuple[datetime, float, float]]:
    with Path(path).open(newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(line for line in fh if not line.startswith("#")))
    return [(datetime.fromisoformat(r["timestamp"]), float(r[FORECAST_COLUMNS[1]]), float(r[FORECAST_COLUMNS[2]])) for r in rows]


# ----------------------------------------------------------------------
# sweep


def parse_grid(items) -> list[tuple[str, list[str]]]:
    grid = []
    for item in items:
        dotted, sep, values = item.partition("=")
        if not sep or not values.strip():
            raise ConfigError(f"grid entry {item!r} is not of the form section.key=v1,v2")
        dotted = dotted.strip()
        section, key = split_key(dotted)
        texts = [v.strip() for v in values.split(",") if v.strip()]
        for text in texts:
            parse_value(section, key, text)
        grid.append((dotted, texts))
    return grid


def sweep_cells(cfg: RunConfig, grid) -> list[tuple[str, RunConfig, dict]]:
    """Every grid point (times train.seeds unless the seed is a grid axis), in grid order."""
    axes = list(grid)
    if not any(name == "train.seed" for name, _ in axes):
        axes.append(("train.seed", [str(s) for s in cfg["train.seeds"]]))
    cells = []
    for combo in itertools.product(*(values for _, values in axes)):
        assignment = dict(zip((name for name, _ in axes), combo))
        cell_cfg = cfg.with_overrides([f"{k}={v}" for k, v in assignment.items()])
        name = "__".join(f"{k}={v}" for k, v in assignment.items())
        cells.append((name, cell_cfg, assignment))
    return cells


def _atomic_write(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    os.replace(tmp, path)


def cmd_sweep(bundle_path, grid_items, out_dir, cfg: RunConfig) -> list[dict]:
    grid = parse_grid(grid_items)
    if not grid:
        raise ConfigError("sweep needs at least one --grid section.key=v1,v2")
    cells = sweep_cells(cfg, grid)  # validates every cell before any training
    bundle = load_bundle(bundle_path)
    out_dir = Path(out_dir)
    (out_dir / "cells").mkdir(parents=True, exist_ok=True)
    results = []
    for name, cell_cfg, assignment in cells:
        result_path = out_dir / "cells" / f"{name}.json"
        if result_path.exists():
            previous = json.loads(result_path.read_text(encoding="utf-8"))
            if previous.get("config_digest") == cell_cfg.digest():
                print(f"skip {name} (done)")
                results.append(previous)
                continue
        model, state, _, train_report = train_on_bundle(bundle, cell_cfg)
        write_train_report(out_dir / "cells" / f"{name}.train.csv", train_report, {"tool_version": __version__, "config_digest": cell_cfg.digest()})
        ck_path = out_dir / "cells" / f"{name}.ckpt"
        save_checkpoint(model, state, ck_path, bundle.stats, {**provenance(cell_cfg), "target": bundle.series.target_name})
        report, plan = evaluate_checkpoint(bundle, load_checkpoint(ck_path), cell_cfg)
        write_metrics_report(out_dir / "cells" / f"{name}.metrics.jsonl", report, provenance(cell_cfg))
        result = {"cell": name, "assignment": assignment, "config_digest": cell_cfg.digest(), **report.aggregates()}
        _atomic_write(result_path, json.dumps(result, sort_keys=True, indent=1))
        print(f"done {name}: mae {report.mae:.6g} mse {report.mse:.6g}")
        results.append(result)
    write_sweep_summary(out_dir, results, [name for name, _ in grid])
    return results


def summarize_over_seeds(results: list[dict], axes: list[str]) -> list[dict]:
    groups: dict[tuple, list[dict]] = {}
    for r in results:
        key = tuple(r["assignment"][a] for a in axes if a != "train.seed")
        groups.setdefault(key, []).append(r)
    rows = []
    for key, members in groups.items():
        row = dict(zip([a for a in axes if a != "train.seed"], key))
        row["seeds"] = len(members)
        for metric in ("mae", "mape", "mspe", "mse"):
            vals = np.array([m[metric] for m in members])
            row[f"{metric}_mean"] = float(vals.mean())
            row[f"{metric}_range"] = float(vals.max() - vals.min())
        rows.append(row)
    return rows


def write_sweep_summary(out_dir: Path, results: list[dict], axes: list[str]) -> None:
    cols = ["cell", "mae", "mape", "mspe", "mse", "n_points"]
    with (out_dir / "summary.csv").open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(cols)
        for r in results:
            writer.writerow([r["cell"]] + [repr(r[c]) for c in cols[1:]])
    grouped = summarize_over_seeds(results, axes)
    if grouped:
        with (out_dir / "summary_by_setting.csv").open("w", newline="", encoding="utf-8") as fh:
            writer = csv.DictWriter(fh, fieldnames=list(grouped[0]))
            writer.writeheader()
            writer.writerows(grouped)
    for row in grouped:
        label = ", ".join(f"{a}={row[a]}" for a in axes if a in row) or "all"
        print(f"{label}: mae {row['mae_mean']:.6g} ± {row['mae_range'] / 2:.2g}  mse {row['mse_mean']:.6g} ± {row['mse_range'] / 2:.2g}  ({row['seeds']} seeds)")


# ----------------------------------------------------------------------
# argument parsing


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="INI file with [data], [model], [train], [eval] sections")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE", help="override one config value (repeatable)")
    p.add_argument("--seed", type=int, help="shorthand for --set train.seed=N")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dewp", description="Wind power forecasting with stacked Fourier-basis expansion blocks")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("preprocess", help="raw CSV -> normalized dataset bundle")
    p.add_argument("raw_csv")
    p.add_argument("--out", required=True)
    _add_common(p)

    p = sub.add_parser("train", help="train a model on a bundle")
    p.add_argument("bundle")
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--report", help="training report path (default: <out>.train.csv)")
    _add_common(p)

    p = sub.add_parser("evaluate", help="rolling-origin evaluation of a checkpoint")
    p.add_argument("bundle")
    p.add_argument("checkpoint")
    p.add_argument("--out", required=True, help="metrics report path")
    _add_common(p)

    p = sub.add_parser("predict", help="forecast H hours from one origin")
    p.add_argument("checkpoint")
    p.add_argument("recent_csv")
    p.add_argument("--origin", required=True, help="timestamp of the first forecast hour")
    p.add_argument("--out", required=True)
    _add_common(p)

    p = sub.add_parser("sweep", help="train and evaluate over a parameter grid")
    p.add_argument("bundle")
    p.add_argument("--grid", action="append", default=[], metavar="SECTION.KEY=V1,V2", required=True)
    p.add_argument("--out", required=True, help="output directory (reruns resume)")
    _add_common(p)

    p = sub.add_parser("synth", help="write a synthetic turbine-like CSV")
    p.add_argument("--hours", type=int, default=2000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--start", default="2016-01-01T00:00:00")
    p.add_argument("--feature-noise", type=float, default=1.0)
    p.add_argument("--drop-fraction", type=float, default=0.0)
    p.add_argument("--step-minutes", type=int, default=60)
    p.add_argument("--out", required=True)
    return parser


def run(args) -> None:
    if args.command == "synth":
        if args.hours < 1 or args.step_minutes < 1:
            raise ConfigError("--hours and --step-minutes must be positive")
        write_seasonal_csv(
            args.out,
            args.hours,
            seed=args.seed,
            start=parse_timestamp(args.start),
            feature_noise=args.feature_noise,
            drop_fraction=args.drop_fraction,
            step_minutes=args.step_minutes,
        )
        print(f"wrote {args.out}")
        return
    cfg = load_config(args.config, args.overrides, args.seed)
    if args.command == "preprocess":
        cmd_preprocess(args.raw_csv, args.out, cfg)
    elif args.command == "train":
        cmd_train(args.bundle, args.out, cfg, args.report)
    elif args.command == "evaluate":
        cmd_evaluate(args.bundle, args.checkpoint, args.out, cfg)
    elif args.command == "predict":
        try:
            origin = parse_timestamp(args.origin)
        except ValueError:
            raise ConfigError(f"--origin: cannot parse {args.origin!r}") from None
        cmd_predict(args.checkpoint, args.recent_csv, origin, args.out, cfg)
    elif args.command == "sweep":
        cmd_sweep(args.bundle, args.grid, args.out, cfg)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        run(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericAbort as exc:
        print(f"numeric abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except DewpError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
