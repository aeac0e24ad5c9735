"""Acceptance suite: one test per criterion, at the stated tolerances.

The summary hook in conftest.py prints a PASS/FAIL line per criterion.
Criteria 7 and 8 train on the desk-scale synthetic benchmark and take a few
minutes on one core.
"""

import json
import time
from datetime import datetime
from pathlib import Path

import numpy as np
import pytest

from dewp import serialization
from dewp.autodiff import Tape, Tensor, backward
from dewp.cli import main
from dewp.config import load_config
from dewp.data import (
    HourlySeries,
    apply_normalization,
    fit_normalization,
    invert_normalization,
    load_bundle,
    window_arrays,
    window_count,
)
from dewp.errors import CheckpointError, ConfigMismatchError
from dewp.evaluation import mae, mape, mspe
from dewp.model import DEWP, ModelConfig, build_basis, inference_forward, mse_loss
from dewp.training import (
    OptimizerState,
    TrainConfig,
    gradient_step,
    load_checkpoint,
    read_train_report,
    save_checkpoint,
    train,
    training_data,
)

from oracles import assert_grad_close, central_difference, loop_mae, loop_mape, loop_mspe

ROOT = Path(__file__).resolve().parent.parent
DESK = ROOT / "configs" / "desk.ini"
FIXTURE = Path(__file__).parent / "fixtures" / "tiny48.csv"

TOY = dict(d=3, d_v=8, L=8, H=4, M=2, heads=2, conv_channels=8)


def random_windows(cfg, batch, seed):
    rng = np.random.default_rng(seed)
    feats = rng.uniform(0, 1, (batch, cfg.d, cfg.L))
    cal = np.stack(
        [rng.integers(0, 12, (batch, cfg.L)), rng.integers(0, 7, (batch, cfg.L)), rng.integers(0, 24, (batch, cfg.L))],
        axis=-1,
    )
    return feats, cal


@pytest.fixture(scope="module")
def benchmark(tmp_path_factory):
    """The synthetic benchmark CSV and its bundle, built through the CLI."""
    root = tmp_path_factory.mktemp("bench")
    assert main(["synth", "--hours", "2000", "--seed", "0", "--feature-noise", "3", "--out", str(root / "raw.csv")]) == 0
    assert main(["preprocess", str(root / "raw.csv"), "--out", str(root / "bundle.bin"), "--config", str(DESK)]) == 0
    return root


# ----------------------------------------------------------------------


def test_criterion_01_gradient_fidelity():
    t0 = time.perf_counter()
    cfg = ModelConfig(**TOY)
    model = DEWP(cfg, seed=0)
    # evaluate at a generic point: zero biases put ReLU inputs exactly on the kink
    rng = np.random.default_rng(1)
    for name, t in model.params.items():
        if name.split(".")[-1] in ("bias", "bz", "brho", "bq", "bk", "bv", "bo"):
            t.data = t.data + rng.uniform(0.05, 0.2, t.shape)
    feats, cal = random_windows(cfg, 2, seed=2)
    target = rng.uniform(0, 1, (2, cfg.H))

    def loss_value():
        return mse_loss(model.forward(feats, cal), Tensor(target)).item()

    with Tape() as tape:
        loss = mse_loss(model.forward(feats, cal), Tensor(target))
    backward(loss, tape)
    checked = 0
    for name, t in model.params.items():
        numeric = central_difference(loss_value, t.data, 1e-6)
        assert_grad_close(t.grad, numeric, abs_tol=1e-4, rel_tol=1e-3, label=name)
        checked += t.size
    assert checked == sum(t.size for t in model.params.values())
    assert time.perf_counter() - t0 < 300


def test_criterion_02_residual_telescoping():
    cfg = ModelConfig(**{**TOY, "M": 5})
    worst = 0.0
    for draw in range(50):
        model = DEWP(cfg, seed=draw)
        feats, cal = random_windows(cfg, 3, seed=1000 + draw)
        _, diag = model.forward_with_diagnostics(feats, cal)
        direct = diag.inputs[0] - np.sum(diag.backcasts, axis=0)
        worst = max(worst, float(np.max(np.abs(diag.inputs[-1] - direct))))
    assert worst <= 1e-10


def test_criterion_03_basis_correctness():
    worst = 0.0
    for L in (8, 24):
        for H in (4, 12):
            basis = build_basis(L, H)
            for n, offset, B in ((L, -L, basis.backcast_basis), (H, 0, basis.forecast_basis)):
                t = (np.arange(n) + offset) / (L + H)
                signals = [np.cos(2 * np.pi * i * t) for i in range(n // 2 + (n % 2))]
                signals += [np.sin(2 * np.pi * i * t) for i in range(1, n // 2)]
                for s in signals:
                    coef, *_ = np.linalg.lstsq(B, s, rcond=None)
                    worst = max(worst, float(np.max(np.abs(B @ coef - s))))
    assert worst <= 1e-8


def test_criterion_04_attention_contract():
    cfg = ModelConfig(**TOY)
    worst = 0.0
    for draw in range(100):
        rng = np.random.default_rng(draw)
        inf = DEWP(cfg, seed=draw).stacks[0].inf
        xf = Tensor(rng.standard_normal((2, cfg.d_v, cfg.H)) * rng.uniform(0.1, 20))
        _, attn = inference_forward(xf, inf, cfg.heads, return_attention=True)
        worst = max(worst, float(np.max(np.abs(attn.data.sum(axis=-1) - 1.0))))
    assert worst <= 1e-12

    inf = DEWP(cfg, seed=0).stacks[0].inf
    for key in ("wq", "wk", "bq", "bk"):
        inf[key] = Tensor(np.zeros_like(inf[key].data))
    _, attn = inference_forward(Tensor(np.random.default_rng(5).standard_normal((cfg.d_v, cfg.H))), inf, cfg.heads, return_attention=True)
    assert np.all(attn.data == 1.0 / cfg.d_v)


def test_criterion_05_metric_oracles():
    rng = np.random.default_rng(0)
    worst = 0.0
    zero_cases = 0
    for _ in range(1000):
        n = int(rng.integers(1, 50))
        y, yhat = rng.uniform(-1, 1, n), rng.uniform(-1, 1, n)
        if rng.random() < 0.3:
            y[rng.integers(0, n, int(rng.integers(1, 4)))] = 0.0
            zero_cases += 1
        worst = max(
            worst,
            abs(mae(y, yhat) - loop_mae(y, yhat)),
            abs(mape(y, yhat, 1e-3) - loop_mape(y, yhat, 1e-3)),
            abs(mspe(y, yhat, 1e-3) - loop_mspe(y, yhat, 1e-3)),
        )
    assert zero_cases > 100
    assert worst <= 1e-12


def test_criterion_06_pipeline_round_trips(tmp_path):
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(20):
        T = int(rng.integers(5, 200))
        matrix = rng.normal(rng.uniform(-1000, 1000), rng.uniform(0.1, 500), (4, T))
        series = HourlySeries(datetime(2016, 1, 1), ("a", "b", "c", "p"), matrix, "p")
        stats = fit_normalization(series)
        back = invert_normalization(apply_normalization(series, stats), stats)
        worst = max(worst, float(np.max(np.abs(back.matrix - matrix) / np.maximum(1.0, np.abs(matrix)))))
    assert worst <= 1e-12

    for _ in range(200):
        T, L, H, stride = (int(v) for v in (rng.integers(1, 80), rng.integers(1, 20), rng.integers(1, 10), rng.integers(1, 6)))
        enumerated = sum(1 for s in range(0, T, stride) if s + L + H <= T)
        assert window_count(T, L, H, stride) == enumerated
        if enumerated:
            series = HourlySeries(datetime(2016, 1, 1), ("a", "p"), np.zeros((2, T)), "p")
            assert len(window_arrays(series, L, H, stride)) == enumerated

    for name in ("a.bin", "b.bin"):
        assert main(["preprocess", str(FIXTURE), "--out", str(tmp_path / name)]) == 0
    assert serialization.file_digest(tmp_path / "a.bin") == serialization.file_digest(tmp_path / "b.bin")


def test_criterion_07_expressiveness(benchmark):
    t0 = time.perf_counter()
    cfg = load_config(DESK)
    bundle = load_bundle(benchmark / "bundle.bin")
    data = training_data(bundle.train_series(), cfg["model.L"], cfg["model.H"])
    model_cfg = cfg.model_config(len(bundle.series.feature_names))

    # 200 Adam steps on one window
    one = data.train.subset([100])
    model = DEWP(model_cfg, seed=0)
    state = OptimizerState.for_params(model.params)
    step_cfg = TrainConfig(learning_rate=cfg["train.learning_rate"])
    for _ in range(200):
        gradient_step(model, one.features, one.calendar, one.target, state, step_cfg)
    overfit = float(np.mean((model.predict(one.features, one.calendar) - one.target) ** 2))
    print(f"single-window MSE after 200 steps: {overfit:.3g}")
    assert overfit < 1e-3

    # full training on 2,000 hours
    model = DEWP(model_cfg, seed=0)
    model, report = train(model, data, cfg.train_config())
    ratio = report.initial_val_mse / report.best_val_mse
    print(f"validation MSE {report.initial_val_mse:.4g} -> {report.best_val_mse:.4g} ({ratio:.1f}x), epochs {len(report.epochs)}")
    assert all(np.isfinite([r.train_mse for r in report.epochs]))
    assert ratio >= 10
    assert time.perf_counter() - t0 < 600


def _sweep(benchmark, grid, out):
    assert main(["sweep", str(benchmark / "bundle.bin"), "--grid", grid, "--out", str(out), "--config", str(DESK)]) == 0
    results = {}
    for path in sorted((out / "cells").glob("*.json")):
        r = json.loads(path.read_text())
        results[(r["assignment"][grid.split("=")[0]], r["assignment"]["train.seed"])] = r
    return results


def test_criterion_08_directional_ordering(benchmark):
    out = benchmark / "sweeps"
    kinds = _sweep(benchmark, "model.kind=dewp,linear", out / "kind")
    seeds = ["0", "1", "2"]
    for s in seeds:
        print(f"seed {s}: DEWP MAE {kinds[('dewp', s)]['mae']:.5f}  Linear MAE {kinds[('linear', s)]['mae']:.5f}")
    stacks = _sweep(benchmark, "model.M=1,4", out / "stacks")
    mse1 = np.mean([stacks[("1", s)]["mse"] for s in seeds])
    mse4 = np.mean([stacks[("4", s)]["mse"] for s in seeds])
    print(f"mean test MSE over seeds: M=1 {mse1:.6f}  M=4 {mse4:.6f}")

    for s in seeds:
        assert kinds[("dewp", s)]["mae"] <= kinds[("linear", s)]["mae"], f"seed {s}"
    assert mse4 <= mse1


def test_criterion_09_determinism(tmp_path):
    ini = tmp_path / "toy.ini"
    ini.write_text(
        "[data]\nboundary = 2016-01-21T00:00:00\n[model]\nL = 24\nH = 12\nd_v = 8\nM = 2\nconv_channels = 8\nheads = 2\n"
        "[train]\nbatch_size = 64\nlearning_rate = 1e-3\nmax_epochs = 3\n"
    )
    assert main(["synth", "--hours", "600", "--seed", "2", "--drop-fraction", "0.02", "--out", str(tmp_path / "raw.csv")]) == 0
    for run in ("1", "2"):
        d = tmp_path / run
        d.mkdir()
        common = ["--config", str(ini), "--seed", "7"]
        assert main(["preprocess", str(tmp_path / "raw.csv"), "--out", str(d / "b.bin"), *common]) == 0
        assert main(["train", str(d / "b.bin"), "--out", str(d / "c.bin"), *common]) == 0
        assert main(["evaluate", str(d / "b.bin"), str(d / "c.bin"), "--out", str(d / "m.jsonl"), *common]) == 0
    one, two = tmp_path / "1", tmp_path / "2"
    assert (one / "b.bin").read_bytes() == (two / "b.bin").read_bytes()
    assert (one / "c.bin").read_bytes() == (two / "c.bin").read_bytes()
    assert (one / "m.jsonl").read_bytes() == (two / "m.jsonl").read_bytes()
    r1, meta1 = read_train_report(one / "c.bin.train.csv")
    r2, meta2 = read_train_report(two / "c.bin.train.csv")
    assert r1.timing_free() == r2.timing_free() and meta1 == meta2


def test_criterion_10_checkpoint_integrity(tmp_path):
    cfg = ModelConfig(**TOY)
    model = DEWP(cfg, seed=3)
    state = OptimizerState.for_params(model.params)
    feats, cal = random_windows(cfg, 4, seed=0)
    target = np.random.default_rng(1).uniform(0, 1, (4, cfg.H))
    for _ in range(3):
        gradient_step(model, feats, cal, target, state, TrainConfig(learning_rate=1e-3))
    path = tmp_path / "c.bin"
    save_checkpoint(model, state, path)

    ck = load_checkpoint(path, cfg)
    for k in model.params:
        assert ck.model.params[k].data.tobytes() == model.params[k].data.tobytes()
        assert ck.optimizer.m[k].tobytes() == state.m[k].tobytes()
        assert ck.optimizer.v[k].tobytes() == state.v[k].tobytes()
    assert ck.optimizer.t == state.t == 3
    assert ck.model.predict(feats, cal).tobytes() == model.predict(feats, cal).tobytes()

    blob = path.read_bytes()
    missed = []
    for pos in range(len(blob)):
        bad = bytearray(blob)
        bad[pos] ^= 0xFF
        try:
            serialization.unpack(bytes(bad), "dewp-checkpoint")
        except CheckpointError:
            continue
        missed.append(pos)
    assert not missed, f"undetected corruption at byte offsets {missed[:10]}"
    bad = bytearray(blob)
    bad[len(blob) // 2] ^= 0x01
    (tmp_path / "bad.bin").write_bytes(bytes(bad))
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "bad.bin")

    with pytest.raises(ConfigMismatchError):
        load_checkpoint(path, ModelConfig(**{**TOY, "d_v": 16}))
    with pytest.raises(ConfigMismatchError):
        load_checkpoint(path, ModelConfig(**{**TOY, "M": 3}))
