import numpy as np
import pytest
from dataclasses import replace

from storagebid.arbitrage import kkt_residuals, solve_hindsight
from storagebid.domain import PRICE_TAKER, StorageParams, ValidationError
from storagebid.loss import LossConfig
from storagebid.pipeline import (
    TrainConfig,
    backtest,
    build_dataset,
    build_feature_windows,
    compare_reports,
    train_decision_focused,
)
from storagebid.predictor import NetSpec, init_weights, pretrain_mse
from storagebid.synth import synthetic_price_series

PAPER = StorageParams(power_rating=0.5, capacity=1.0, efficiency=0.9,
                      cost_linear=10.0, cost_quadratic=0.0, num_segments=10,
                      initial_soc=0.5)
IDEAL = StorageParams(power_rating=0.5, capacity=1.0, efficiency=1.0,
                      cost_linear=0.0, cost_quadratic=0.0, num_segments=10,
                      initial_soc=0.5)


@pytest.fixture(scope="module")
def week_series():
    return synthetic_price_series(7, seed=3)


class TestBuildDataset:
    def test_window_arithmetic_single_sample(self):
        series = synthetic_price_series(2, seed=0)  # 48 intervals
        ds = build_dataset(series, PAPER, horizon=24, stride=1)
        assert len(ds) == 1
        assert ds[0].features.x.size == 72
        assert ds[0].actual_prices.size == 24

    def test_constant_prices_idle_labels(self):
        from datetime import datetime, timedelta
        from storagebid.domain import PriceSeries

        n = 60
        stamps = tuple(datetime(2024, 1, 1) + timedelta(hours=k) for k in range(n))
        series = PriceSeries(timestamps=stamps, rtp=np.full(n, 10.0))
        params = replace(PAPER, initial_soc=0.0)
        ds = build_dataset(series, params, horizon=24, stride=4)
        for s in ds:
            assert s.label_p.max() < 1e-7
            assert s.label_b.max() < 1e-7

    def test_labels_feasible(self, week_series):
        ds = build_dataset(week_series, PAPER, horizon=24, stride=24)
        for s in ds:
            sol = solve_hindsight(s.actual_prices, PAPER, s.label_e_prev)
            res = kkt_residuals(sol, s.actual_prices, PAPER, s.label_e_prev)
            assert res["primal"] <= 1e-6
            assert 0.0 <= s.label_e_prev <= PAPER.capacity
            np.testing.assert_allclose(sol.p, s.label_p, atol=1e-6)

    def test_chain_soc_is_continuous(self, week_series):
        ds = build_dataset(week_series, PAPER, horizon=24, stride=1)
        eta = PAPER.efficiency
        for a, b in zip(ds[:-1], ds[1:]):
            step = a.label_e_prev - a.label_p[0] / eta + a.label_b[0] * eta
            assert b.label_e_prev == pytest.approx(min(max(step, 0.0), 1.0), abs=1e-9)

    def test_too_short_series_rejected(self):
        series = synthetic_price_series(1, seed=0)
        with pytest.raises(ValidationError):
            build_dataset(series, PAPER, horizon=24)


class TestTraining:
    @pytest.fixture(scope="class")
    def tiny_setup(self):
        series = synthetic_price_series(6, seed=5)
        ds = build_dataset(series, PAPER, horizon=12, stride=13)
        windows = build_feature_windows(series, horizon=12, stride=3)
        pre = pretrain_mse(windows, NetSpec(layers=(72, 16, 12), seed=5),
                           epochs=10, batch_size=8, lr=1e-3, seed=5)
        return ds, pre.weights

    def test_zero_learning_rate_keeps_weights(self, tiny_setup):
        ds, w0 = tiny_setup
        result = train_decision_focused(
            ds, w0, PAPER, LossConfig(rng_seed=1),
            TrainConfig(epochs=1, batch_size=4, lr=0.0, seed=1),
        )
        np.testing.assert_array_equal(result.weights.values, w0.values)

    def test_loss_decreases_on_average(self):
        series = synthetic_price_series(10, seed=8)
        ds = build_dataset(series, PAPER, horizon=12, stride=5)
        windows = build_feature_windows(series, horizon=12, stride=2)
        pre = pretrain_mse(windows, NetSpec(layers=(72, 16, 12), seed=8),
                           epochs=10, batch_size=8, lr=1e-3, seed=8)
        result = train_decision_focused(
            ds, pre.weights, PAPER, LossConfig(epsilon=1.0, rng_seed=8),
            TrainConfig(epochs=8, batch_size=len(ds), lr=1e-3, seed=8),
        )
        assert result.loss_trace[-1] < result.loss_trace[0]

    def test_resume_is_bit_identical(self, tiny_setup):
        ds, w0 = tiny_setup
        cfg_loss = LossConfig(rng_seed=2)
        full = train_decision_focused(
            ds, w0, PAPER, cfg_loss, TrainConfig(epochs=4, batch_size=4, lr=1e-4, seed=2)
        )
        half = train_decision_focused(
            ds, w0, PAPER, cfg_loss, TrainConfig(epochs=2, batch_size=4, lr=1e-4, seed=2)
        )
        resumed = train_decision_focused(
            ds, half.weights, PAPER, cfg_loss,
            TrainConfig(epochs=4, batch_size=4, lr=1e-4, seed=2),
            start_epoch=2, adam=half.adam,
        )
        np.testing.assert_array_equal(resumed.weights.values, full.weights.values)


class TestBacktest:
    def test_foresight_equals_hindsight_lossless(self):
        series = synthetic_price_series(7, seed=11)
        report = backtest(series, None, IDEAL, mode="foresight", start=0)
        hind = solve_hindsight(series.rtp, IDEAL, IDEAL.initial_soc)
        assert report.final_profit == pytest.approx(hind.objective, abs=1e-6)

    def test_profit_never_exceeds_hindsight(self, week_series):
        w = init_weights(NetSpec(layers=(72, 16, 24), seed=1))
        report = backtest(week_series, w, PAPER, mode="df")
        hind = solve_hindsight(
            week_series.rtp[report.start_index :], PAPER, PAPER.initial_soc
        )
        assert report.final_profit <= hind.objective + 1e-6

    def test_constant_prices_idle(self):
        from datetime import datetime, timedelta
        from storagebid.domain import PriceSeries

        n = 72
        stamps = tuple(datetime(2024, 1, 1) + timedelta(hours=k) for k in range(n))
        series = PriceSeries(timestamps=stamps, rtp=np.full(n, 30.0))
        empty = replace(PAPER, initial_soc=0.0)
        report = backtest(series, None, empty, mode="foresight", start=0)
        assert report.final_profit <= 1e-9
        assert report.p.max() < 1e-7 and report.b.max() < 1e-7

    def test_soc_stays_in_bounds(self, week_series):
        report = backtest(week_series, None, PAPER, mode="foresight", start=0)
        assert report.soc.min() >= -1e-9
        assert report.soc.max() <= PAPER.capacity + 1e-9

    def test_deterministic(self, week_series):
        a = backtest(week_series, None, PAPER, mode="foresight", start=0)
        b = backtest(week_series, None, PAPER, mode="foresight", start=0)
        np.testing.assert_array_equal(a.profit, b.profit)


class TestCompareReports:
    def test_equal_reports_zero_delta(self, week_series):
        a = backtest(week_series, None, PAPER, mode="foresight", start=0)
        summary = compare_reports(a, a)
        assert summary.delta == 0.0
        assert summary.pct_improvement == 0.0

    def test_percentage(self):
        from storagebid.pipeline import BacktestReport

        def rep(profits):
            n = len(profits)
            return BacktestReport(
                mode="x", start_index=0, resolution="", t=np.arange(n, dtype=float),
                p=np.zeros(n), b=np.zeros(n), soc=np.zeros(n), price=np.zeros(n),
                profit=np.array(profits, dtype=float), final_profit=float(sum(profits)),
                curve_order_events=0,
            )

        summary = compare_reports(rep([60.0, 61.0]), rep([50.0, 50.0]))
        assert summary.pct_improvement == pytest.approx(21.0)

    def test_csv_columns(self, week_series, tmp_path):
        a = backtest(week_series, None, PAPER, mode="foresight", start=0)
        path = tmp_path / "cmp.csv"
        compare_reports(a, a, csv_path=path)
        header = path.read_text().splitlines()[0]
        assert header == "t,cumprofit_a,cumprofit_b"

    def test_mismatched_ranges_rejected(self, week_series):
        a = backtest(week_series, None, PAPER, mode="foresight", start=0)
        b = backtest(week_series, None, PAPER, mode="foresight", start=24)
        with pytest.raises(ValidationError):
            compare_reports(a, b)
