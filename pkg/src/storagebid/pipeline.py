"""Dataset construction, the decision-focused training loop, and the
rolling-horizon backtester.

The backtest is the product: at each interval it predicts the price window,
values the storage at the live SoC, submits the resulting bid curve, clears
it against the actual price, and rolls the SoC forward. Training moves the
predictor's weights along the chain

    loss -> bid duals -> predicted prices -> weights

using the perturbed loss gradient, the linearized-optimality dual Jacobian,
and the network's vector-Jacobian product.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .arbitrage import solve_hindsight, solve_hindsight_pricemaker
from .bids import anchored_bid_curve, anchored_levels
from .clearing import ClearingResult, clear_price_maker, clear_price_taker, settle_profit
from .domain import (
    LOOKBACK_INTERVALS,
    PRICE_TAKER,
    FeatureWindow,
    PriceSeries,
    Sample,
    SensitivityModel,
    StorageParams,
    ValidationError,
)
from .kktdiff import theta_with_jacobian
from .loss import LossConfig, anchored_loss_and_grad
from .predictor import AdamState, Weights, adam_step, forward, vjp

__all__ = [
    "TrainConfig",
    "TrainResult",
    "BacktestReport",
    "ComparisonSummary",
    "build_dataset",
    "train_decision_focused",
    "backtest",
    "compare_reports",
]

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 20
    batch_size: int = 32
    lr: float = 1e-4
    seed: int = 0
    workers: int = 0


@dataclass(frozen=True)
class TrainResult:
    weights: Weights
    loss_trace: list[float]
    degenerate_count: int
    adam: AdamState


def _feature_vector(series: PriceSeries, i: int) -> np.ndarray:
    lo = i - LOOKBACK_INTERVALS
    return np.concatenate([series.channel(name)[lo:i] for name in series.channels])


def _hindsight(prices, params, e0, sens):
    if sens.kind == "price_taker":
        return solve_hindsight(prices, params, e0)
    return solve_hindsight_pricemaker(prices, sens, params, e0)


def build_feature_windows(
    series: PriceSeries, horizon: int = 24, stride: int = 1
) -> list[FeatureWindow]:
    """Feature/target windows without hindsight labels (enough for MSE
    pretraining, which never touches the optimization layers)."""
    n = len(series)
    first = LOOKBACK_INTERVALS
    if n < first + horizon:
        raise ValidationError("series too short for one feature window plus horizon")
    return [
        FeatureWindow(x=_feature_vector(series, i), target=series.rtp[i : i + horizon])
        for i in range(first, n - horizon + 1, stride)
    ]


def build_dataset(
    series: PriceSeries,
    params: StorageParams,
    horizon: int = 24,
    stride: int = 1,
    sens: SensitivityModel = PRICE_TAKER,
) -> list[Sample]:
    """Samples with hindsight labels over each forward horizon.

    The labels' entering SoC comes from a rolling hindsight chain: at every
    interval the horizon program is solved from the chain SoC and only its
    first action advances the state. A continuously operated asset never
    drains just because a solve window ends, and each sample's label is then
    exactly the action the perfect-foresight policy takes at that state.
    """
    n = len(series)
    first = LOOKBACK_INTERVALS
    if n < first + horizon:
        raise ValidationError("series too short for one feature window plus horizon")

    eta = params.efficiency
    starts = set(range(first, n - horizon + 1, stride))
    samples = []
    soc = params.initial_soc
    for i in range(n):
        prices = series.rtp[i : i + horizon]
        sol = _hindsight(prices, params, soc, sens)
        if i in starts:
            samples.append(
                Sample(
                    features=FeatureWindow(x=_feature_vector(series, i), target=prices),
                    label_p=sol.p,
                    label_b=sol.b,
                    label_e_prev=float(soc),
                    actual_prices=prices,
                )
            )
        soc = min(max(soc - sol.p[0] / eta + sol.b[0] * eta, 0.0), params.capacity)
    return samples


def train_decision_focused(
    dataset: list[Sample],
    w0: Weights,
    params: StorageParams,
    loss_cfg: LossConfig,
    train_cfg: TrainConfig,
    sens: SensitivityModel = PRICE_TAKER,
    start_epoch: int = 0,
    adam: AdamState | None = None,
) -> TrainResult:
    """Fine-tune predictor weights through the bid and clearing layers.

    Per sample: predict the horizon prices, value the power slices anchored
    at the label's entering SoC on the window tail (the same curve the
    backtester submits), differentiate those duals with respect to the
    window, take the perturbed loss gradient at the first interval, and
    chain everything into a weight gradient. Noise streams derive from
    (seed, epoch, sample), so restarting from a checkpoint at an epoch
    boundary replays the exact run. Degenerate Jacobian rows contribute zero
    gradient and are counted.
    """
    if not dataset:
        raise ValidationError("training needs a nonempty dataset")
    w = w0
    state = adam if adam is not None else AdamState.fresh(w.spec.num_params, lr=train_cfg.lr)
    n = params.num_segments
    trace: list[float] = []
    degenerate = 0

    def sample_grad(w_now, epoch, k):
        s = dataset[int(k)]
        lam_hat = forward(s.features, w_now)
        down, up = anchored_levels(s.label_e_prev, params)
        theta, jac = theta_with_jacobian(lam_hat, params, np.concatenate([down, up]))
        lv = anchored_loss_and_grad(
            theta[:n], theta[n:], s, params, loss_cfg, sens=sens,
            seed=[loss_cfg.rng_seed, epoch, int(k)],
        )
        return lv.loss, vjp(s.features, w_now, lv.grad_theta @ jac.matrix), jac.num_degenerate

    for epoch in range(start_epoch, train_cfg.epochs):
        order = np.random.default_rng([train_cfg.seed, epoch]).permutation(len(dataset))
        epoch_loss = 0.0
        for chunk_start in range(0, len(dataset), train_cfg.batch_size):
            idx = order[chunk_start : chunk_start + train_cfg.batch_size]
            if train_cfg.workers > 1:
                from concurrent.futures import ThreadPoolExecutor

                with ThreadPoolExecutor(max_workers=train_cfg.workers) as pool:
                    parts = list(pool.map(lambda k: sample_grad(w, epoch, k), idx))
            else:
                parts = [sample_grad(w, epoch, k) for k in idx]
            # summed in index order so the result is identical at any worker count
            grad_sum = np.zeros(w.spec.num_params)
            for loss_k, grad_k, deg_k in parts:
                epoch_loss += loss_k
                grad_sum += grad_k
                degenerate += deg_k
            w, state = adam_step(w, grad_sum / len(idx), state)
        trace.append(epoch_loss / len(dataset))
    return TrainResult(weights=w, loss_trace=trace, degenerate_count=degenerate, adam=state)


@dataclass(frozen=True)
class BacktestReport:
    """Per-interval results of a sequential bidding simulation."""

    mode: str
    start_index: int
    resolution: str
    t: np.ndarray
    p: np.ndarray
    b: np.ndarray
    soc: np.ndarray
    price: np.ndarray
    profit: np.ndarray
    final_profit: float
    curve_order_events: int

    def cumulative_profit(self) -> np.ndarray:
        return np.cumsum(self.profit)

    def write_csv(self, path) -> None:
        with open(path, "w") as fh:
            fh.write("t,p,b,soc,price,profit\n")
            for k in range(self.t.size):
                fh.write(
                    f"{int(self.t[k])},{float(self.p[k])!r},{float(self.b[k])!r},"
                    f"{float(self.soc[k])!r},{float(self.price[k])!r},{float(self.profit[k])!r}\n"
                )

    def summary(self) -> dict:
        return {
            "mode": self.mode,
            "start_index": self.start_index,
            "resolution": self.resolution,
            "intervals": int(self.t.size),
            "final_profit": self.final_profit,
            "discharge_intervals": int(np.sum(self.p > 1e-9)),
            "charge_intervals": int(np.sum(self.b > 1e-9)),
            "curve_order_events": self.curve_order_events,
        }


def backtest(
    series: PriceSeries,
    weights: Weights | None,
    params: StorageParams,
    sens: SensitivityModel = PRICE_TAKER,
    mode: str = "df",
    horizon: int = 24,
    start: int | None = None,
    stop: int | None = None,
) -> BacktestReport:
    """Sequential simulation of the full bidding policy.

    At each interval: predict prices over the window starting there (or use
    the actual prices when ``weights`` is None, the perfect-foresight
    bypass), value the live SoC's power slices on the window tail, form the
    anchored bid curve, clear against the actual price, and roll the SoC.
    The mechanical pipeline is identical for every mode string; only the
    supplied weights differ.
    """
    n = len(series)
    start = LOOKBACK_INTERVALS if start is None else start
    stop = n if stop is None else stop
    if weights is not None and start < LOOKBACK_INTERVALS:
        raise ValidationError("predictions need a full trailing feature window")
    if not start < stop <= n:
        raise ValidationError("empty backtest range")

    soc = params.initial_soc
    rows_t, rows_p, rows_b, rows_soc, rows_price, rows_profit = [], [], [], [], [], []
    results: list[ClearingResult] = []
    order_events = 0
    for t in range(start, stop):
        upper = min(t + horizon, stop)
        if weights is None:
            window = series.rtp[t:upper]
        else:
            window = forward(_feature_vector(series, t), weights)[: upper - t]
        curve = anchored_bid_curve(window, soc, params)
        if np.any(np.diff(curve.discharge_prices) < -1e-9):
            order_events += 1
        actual = float(series.rtp[t])
        if sens.kind == "price_taker":
            res = clear_price_taker(curve, actual, soc, params)
        else:
            res = clear_price_maker(curve, actual, sens, soc, params)
        results.append(res)
        net = res.p_total - res.b_total
        interval_profit = res.realized_price * net - (
            params.cost_linear * res.p_total + params.cost_quadratic * res.p_total**2
        )
        soc = res.soc_after
        assert -1e-9 <= soc <= params.capacity + 1e-9, "SoC left its bounds"
        rows_t.append(t)
        rows_p.append(res.p_total)
        rows_b.append(res.b_total)
        rows_soc.append(soc)
        rows_price.append(res.realized_price)
        rows_profit.append(interval_profit)

    total = settle_profit(results, params)
    return BacktestReport(
        mode=mode,
        start_index=start,
        resolution=str(series.step),
        t=np.array(rows_t, dtype=float),
        p=np.array(rows_p),
        b=np.array(rows_b),
        soc=np.array(rows_soc),
        price=np.array(rows_price),
        profit=np.array(rows_profit),
        final_profit=float(total),
        curve_order_events=order_events,
    )


@dataclass(frozen=True)
class ComparisonSummary:
    final_a: float
    final_b: float
    delta: float
    pct_improvement: float


def compare_reports(a: BacktestReport, b: BacktestReport, csv_path=None) -> ComparisonSummary:
    """Aligned cumulative-profit comparison; improvement is a relative to b."""
    if a.t.size != b.t.size or not np.array_equal(a.t, b.t):
        raise ValidationError("reports cover different horizons")
    cum_a = a.cumulative_profit()
    cum_b = b.cumulative_profit()
    if csv_path is not None:
        with open(csv_path, "w") as fh:
            fh.write("t,cumprofit_a,cumprofit_b\n")
            for k in range(a.t.size):
                fh.write(f"{int(a.t[k])},{float(cum_a[k])!r},{float(cum_b[k])!r}\n")
    delta = a.final_profit - b.final_profit
    pct = float("inf") if b.final_profit == 0 else 100.0 * delta / abs(b.final_profit)
    return ComparisonSummary(
        final_a=a.final_profit,
        final_b=b.final_profit,
        delta=delta,
        pct_improvement=pct,
    )
