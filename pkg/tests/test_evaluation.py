from datetime import datetime, timedelta

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dewp.autodiff import Tape, Tensor, backward
from dewp.baseline import LinearBaseline, LinearConfig
from dewp.data import HourlySeries, NormalizationStats
from dewp.errors import ConfigError, ContractError, DimensionError, PlanningError
from dewp.evaluation import (
    RollingPlan,
    linear_baseline_predict,
    linear_baseline_train,
    mae,
    mape,
    mse,
    mspe,
    read_metrics_report,
    rolling_evaluate,
    summarize,
    write_metrics_report,
)
from dewp.model import mse_loss
from dewp.training import TrainConfig, training_data

from oracles import assert_grad_close, central_difference, loop_mae, loop_mape, loop_mspe

START = datetime(2016, 6, 1)


def make_series(T, d=2, seed=0, start=START):
    rng = np.random.default_rng(seed)
    names = tuple(f"x{i}" for i in range(d)) + ("power",)
    return HourlySeries(start, names, rng.uniform(0, 1, (d + 1, T)), "power")


class OracleModel:
    """Looks the answer up in the series it was built from."""

    def __init__(self, series, L, H):
        self.series, self.lookback, self.horizon = series, L, H
        self.seen = []

    def predict(self, features, calendar):
        self.seen.append(features[0].copy())
        # locate the window by matching its features
        feats = self.series.features
        for i in range(self.lookback, self.series.n_hours + 1):
            if np.array_equal(feats[:, i - self.lookback : i], features[0]):
                return self.series.target[None, i : i + self.horizon]
        raise AssertionError("window not found")


class ConstantModel:
    def __init__(self, value, L, H):
        self.value, self.lookback, self.horizon = value, L, H

    def predict(self, features, calendar):
        return np.full((features.shape[0], self.horizon), self.value)


class TestMetrics:
    def test_examples(self):
        assert mae([1, 2], [1, 3]) == 0.5
        assert mape([2], [1]) == 0.5
        assert mspe([2], [0]) == 2.0
        assert mse([1, 1], [0, 0]) == 1.0

    def test_equal_is_zero(self):
        y = np.random.default_rng(0).uniform(0, 1, 10)
        assert mae(y, y) == mape(y, y) == mspe(y, y) == 0.0

    def test_zero_target_uses_floor(self):
        assert mape([0.0], [0.5]) == pytest.approx(500.0, rel=1e-15)
        assert mspe([0.0], [0.5], floor=0.01) == pytest.approx(25.0, rel=1e-15)
        assert np.isfinite(mape([0.0, 0.0], [0.1, -0.1]))

    @pytest.mark.parametrize("fn", [mae, mape, mspe, mse])
    def test_length_mismatch(self, fn):
        with pytest.raises(DimensionError):
            fn([1.0, 2.0], [1.0])
        with pytest.raises(DimensionError):
            fn([], [])

    @settings(max_examples=50, deadline=None)
    @given(n=st.integers(1, 60), seed=st.integers(0, 10_000), zeros=st.integers(0, 5))
    def test_match_loop_oracles(self, n, seed, zeros):
        rng = np.random.default_rng(seed)
        y, yhat = rng.uniform(-1, 1, n), rng.uniform(-1, 1, n)
        y[rng.integers(0, n, zeros)] = 0.0
        assert abs(mae(y, yhat) - loop_mae(y, yhat)) <= 1e-12
        assert abs(mape(y, yhat) - loop_mape(y, yhat, 1e-3)) <= 1e-12 * max(1.0, loop_mape(y, yhat, 1e-3))
        assert abs(mspe(y, yhat) - loop_mspe(y, yhat, 1e-3)) <= 1e-12 * max(1.0, loop_mspe(y, yhat, 1e-3))


class TestRollingPlan:
    def test_default_interval_is_horizon(self):
        plan = RollingPlan(START, START + timedelta(hours=48), 24)
        assert plan.origins() == [START, START + timedelta(hours=24)]

    def test_partial_tail_dropped(self):
        plan = RollingPlan(START, START + timedelta(hours=50), 24)
        assert len(plan.origins()) == 2

    def test_invalid(self):
        with pytest.raises(ConfigError):
            RollingPlan(START, START + timedelta(hours=5), 24, interval=0)
        with pytest.raises(ConfigError):
            RollingPlan(START, START - timedelta(hours=1), 24)

    @settings(max_examples=40, deadline=None)
    @given(hours=st.integers(0, 200), H=st.integers(1, 30))
    def test_tiles_without_overlap(self, hours, H):
        plan = RollingPlan(START, START + timedelta(hours=hours), H)
        covered = []
        for o in plan.origins():
            covered.extend(o + timedelta(hours=h) for h in range(H))
        assert len(covered) == len(set(covered))
        expected = [START + timedelta(hours=h) for h in range((hours // H) * H)]
        assert covered == expected


class TestRollingEvaluate:
    def test_perfect_oracle(self):
        series = make_series(100)
        model = OracleModel(series, 8, 6)
        plan = RollingPlan(START + timedelta(hours=8), series.end, 6)
        report = rolling_evaluate(model, series, plan)
        assert report.mae == report.mape == report.mspe == report.mse == 0.0

    def test_two_origins_count_points(self):
        series = make_series(24 + 48)
        plan = RollingPlan(START + timedelta(hours=24), series.end, 24)
        report = rolling_evaluate(ConstantModel(0.5, 24, 24), series, plan)
        assert report.n_points == 48 and len(report.rows) == 2

    def test_constant_mean_model(self):
        series = make_series(200, seed=3)
        plan = RollingPlan(START + timedelta(hours=20), series.end, 10)
        idx = series.index_of(plan.start)
        y = series.target[idx : idx + 10 * len(plan.origins())]
        report = rolling_evaluate(ConstantModel(float(y.mean()), 20, 10), series, plan)
        mad = float(np.mean(np.abs(y - y.mean())))
        assert abs(report.mae - mad) <= 1e-10

    def test_lookback_is_observed_data(self):
        series = make_series(60, seed=1)
        model = OracleModel(series, 8, 4)
        plan = RollingPlan(START + timedelta(hours=10), series.end, 4)
        rolling_evaluate(model, series, plan)
        for o, seen in zip(plan.origins(), model.seen):
            i = series.index_of(o)
            np.testing.assert_array_equal(seen, series.features[:, i - 8 : i])

    def test_insufficient_history(self):
        series = make_series(60)
        plan = RollingPlan(START + timedelta(hours=5), series.end, 4)
        with pytest.raises(PlanningError, match="needs 8 hours"):
            rolling_evaluate(ConstantModel(0.0, 8, 4), series, plan)

    def test_plan_past_series_end(self):
        series = make_series(30)
        plan = RollingPlan(START + timedelta(hours=10), series.end + timedelta(hours=12), 4)
        with pytest.raises(PlanningError):
            rolling_evaluate(ConstantModel(0.0, 8, 4), series, plan)

    def test_horizon_mismatch(self):
        series = make_series(30)
        with pytest.raises(ConfigError):
            rolling_evaluate(ConstantModel(0.0, 8, 4), series, RollingPlan(START + timedelta(hours=8), series.end, 5))

    def test_denormalized_mae(self):
        series = make_series(40)
        stats = NormalizationStats(("x0", "x1", "power"), np.zeros(3), np.array([1.0, 1.0, 200.0]), np.zeros(3))
        plan = RollingPlan(START + timedelta(hours=8), series.end, 4)
        report = rolling_evaluate(ConstantModel(0.5, 8, 4), series, plan, stats)
        assert report.mae_raw == pytest.approx(200.0 * report.mae, rel=1e-12)


class TestMetricsReport:
    def report(self):
        series = make_series(80, seed=2)
        plan = RollingPlan(START + timedelta(hours=8), series.end, 6)
        return rolling_evaluate(ConstantModel(0.4, 8, 6), series, plan)

    def test_round_trip_is_consistent(self, tmp_path):
        report = self.report()
        write_metrics_report(tmp_path / "m.jsonl", report, {"config_digest": "xyz"})
        back, header = read_metrics_report(tmp_path / "m.jsonl")
        assert header["config_digest"] == "xyz"
        assert back.aggregates() == report.aggregates()
        back.check_consistency()
        for a, b in zip(back.rows, report.rows):
            assert a.origin == b.origin
            assert a.predictions.tobytes() == b.predictions.tobytes()

    def test_tampered_row_detected(self, tmp_path):
        report = self.report()
        write_metrics_report(tmp_path / "m.jsonl", report)
        back, _ = read_metrics_report(tmp_path / "m.jsonl")
        back.rows[0].predictions[0] += 0.1
        with pytest.raises(ContractError):
            back.check_consistency()

    def test_writer_refuses_inconsistent_report(self, tmp_path):
        report = self.report()
        report.mae = report.mae + 1e-9
        with pytest.raises(ContractError):
            write_metrics_report(tmp_path / "m.jsonl", report)

    def test_summarize_empty(self):
        with pytest.raises(PlanningError):
            summarize([])


class TestLinearBaseline:
    def test_zero_weights_give_output_bias(self):
        model = LinearBaseline(LinearConfig(3, 5, 4), seed=0)
        for t in model.params.values():
            t.data = np.zeros_like(t.data)
        model.params["fc2.bias"].data = np.array([0.1, 0.2, 0.3, 0.4])
        x = np.random.default_rng(0).standard_normal((6, 3, 5))
        np.testing.assert_array_equal(model.predict(x), np.tile([0.1, 0.2, 0.3, 0.4], (6, 1)))

    def test_gradient_check(self):
        model = LinearBaseline(LinearConfig(2, 3, 2, hidden=4), seed=1)
        rng = np.random.default_rng(2)
        for t in model.params.values():
            t.data = t.data + rng.uniform(0.05, 0.1, t.shape)
        x, y = rng.uniform(0, 1, (3, 2, 3)), rng.uniform(0, 1, (3, 2))

        def loss_value():
            return mse_loss(model.forward(x), Tensor(y)).item()

        with Tape() as tape:
            loss = mse_loss(model.forward(x), Tensor(y))
        backward(loss, tape)
        for name, t in model.params.items():
            numeric = central_difference(loss_value, t.data, 1e-6)
            assert_grad_close(t.grad, numeric, abs_tol=1e-5, rel_tol=1e-5, label=name)

    def test_shape_checked(self):
        with pytest.raises(DimensionError):
            LinearBaseline(LinearConfig(2, 3, 2)).predict(np.zeros((1, 3, 3)))

    def test_beats_mean_on_trend(self):
        T = 400
        t = np.arange(T) / T
        rng = np.random.default_rng(0)
        matrix = np.vstack([t + 0.01 * rng.standard_normal(T), 0.5 * t + 0.01 * rng.standard_normal(T), t])
        series = HourlySeries(START, ("a", "b", "power"), matrix, "power")
        train_part = series.slice_hours(0, 320)
        data = training_data(train_part, 12, 4)
        model, _ = linear_baseline_train(data, TrainConfig(batch_size=32, learning_rate=3e-3, max_epochs=60, patience=10))
        plan = RollingPlan(START + timedelta(hours=320), series.end, 4)
        report = linear_baseline_predict(model, series, plan)
        idx = series.index_of(plan.start)
        y = series.target[idx : idx + report.n_points]
        mean_mse = float(np.mean((y - data.train.target.mean()) ** 2))
        assert report.mse < mean_mse
