"""Per-interval market clearing of a bid curve against the realized price.

Price-taker clearing activates every segment whose margin against the
cleared price is strictly positive, then repairs the SoC window with the
cheapest adjustments per unit of stored energy; that greedy is the exact
maximizer of the clearing objective over the segment boxes plus the
single coupling constraint. Price-maker clearing scans the concave profit
envelope over the net dispatch.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .domain import (
    BidCurve,
    SensitivityModel,
    StorageParams,
    ValidationError,
    discharge_cost,
)

__all__ = ["ClearingResult", "clear_price_taker", "clear_price_maker", "settle_profit"]

_WINDOW_TOL = 1e-9


@dataclass(frozen=True)
class ClearingResult:
    """Cleared segment dispatch for one interval."""

    p_seg: np.ndarray
    b_seg: np.ndarray
    p_total: float
    b_total: float
    realized_price: float
    e_prev: float
    soc_after: float

    def __post_init__(self):
        for name in ("p_seg", "b_seg"):
            arr = np.asarray(getattr(self, name), dtype=float)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)


def _finalize(p, b, price, realized, e_prev, params: StorageParams) -> ClearingResult:
    eta = params.efficiency
    delta = eta * b.sum() - p.sum() / eta
    soc_after = e_prev + delta
    # the SoC window is a hard physical constraint; a violation here is a bug
    assert -e_prev - _WINDOW_TOL <= delta <= params.capacity - e_prev + _WINDOW_TOL, (
        "clearing violated the SoC window"
    )
    soc_after = min(max(soc_after, 0.0), params.capacity)
    return ClearingResult(
        p_seg=p,
        b_seg=b,
        p_total=float(p.sum()),
        b_total=float(b.sum()),
        realized_price=float(realized),
        e_prev=float(e_prev),
        soc_after=float(soc_after),
    )


def clear_price_taker(
    bid: BidCurve, price: float, e_prev: float, params: StorageParams
) -> ClearingResult:
    """Exact maximizer of price*(p - b) net of bid costs over the segment
    boxes and the SoC window.

    Activation is strict: a segment whose bid exactly equals the price stays
    idle. When the unconstrained activation overruns the window, the repair
    ranks every remedy (shrink an active segment, or open an unprofitable one
    on the other side) by cost per MWh of stored energy and applies them in
    order, which reproduces the LP optimum.
    """
    eta = params.efficiency
    n = bid.num_segments
    qty = bid.seg_quantity
    margin_p = price - bid.discharge_prices
    margin_b = bid.charge_prices - price
    p = np.where(margin_p > 0.0, qty, 0.0)
    b = np.where(margin_b > 0.0, qty, 0.0)
    lo = -e_prev
    hi = params.capacity - e_prev
    v = eta * b.sum() - p.sum() / eta

    moves: list[tuple[float, int, str, int, float]] = []
    if v > hi:
        need = v - hi
        for j in range(n):
            if b[j] > 0.0:
                moves.append((margin_b[j] / eta, 0, "cut_b", j, b[j] * eta))
            if margin_p[j] <= 0.0:
                moves.append((-margin_p[j] * eta, 1, "add_p", j, qty / eta))
        direction = -1.0
    elif v < lo:
        need = lo - v
        for j in range(n):
            if p[j] > 0.0:
                moves.append((margin_p[j] * eta, 0, "cut_p", j, p[j] / eta))
            if margin_b[j] <= 0.0:
                moves.append((-margin_b[j] / eta, 1, "add_b", j, qty * eta))
        direction = 1.0
    else:
        need = 0.0
        direction = 0.0

    if need > 0.0:
        moves.sort(key=lambda t: (t[0], t[1], t[3]))
        for _, _, kind, j, cap in moves:
            take = min(need, cap)
            if kind == "cut_b":
                b[j] -= take / eta
            elif kind == "add_p":
                p[j] += take * eta
            elif kind == "cut_p":
                p[j] -= take * eta
            else:
                b[j] += take / eta
            need -= take
            if need <= 1e-15:
                break
        # feasible fallback always exists: zero dispatch sits inside the window
        assert need <= 1e-9, "SoC window repair failed"

    return _finalize(p, b, price, price, e_prev, params)


def _fill_by_price(order: np.ndarray, caps: np.ndarray, total: float) -> np.ndarray:
    out = np.zeros_like(caps)
    remaining = total
    for j in order:
        take = min(remaining, caps[j])
        out[j] = take
        remaining -= take
        if remaining <= 0.0:
            break
    return out


def clear_price_maker(
    bid: BidCurve,
    price: float,
    sens: SensitivityModel,
    e_prev: float,
    params: StorageParams,
) -> ClearingResult:
    """Clear against a price that moves with the net dispatch y = p - b.

    The profit (price - f(y))*y minus bid costs is concave in y: the revenue
    term is smooth concave and the best bid cost at fixed y (cheapest
    discharge segments first, dearest charge segments first, subject to the
    SoC window) is piecewise linear concave. A golden-section scan over y,
    with the inner assignment maximized exactly at its kink candidates,
    locates the optimum to better than 1e-6 in y.
    """
    if sens.kind == "price_taker":
        return clear_price_taker(bid, price, e_prev, params)
    eta = params.efficiency
    n = bid.num_segments
    qty = bid.seg_quantity
    caps_total = n * qty
    lo = -e_prev
    hi = params.capacity - e_prev

    s_order = np.argsort(bid.discharge_prices, kind="stable")
    d_order = np.argsort(-bid.charge_prices, kind="stable")
    s_sorted = bid.discharge_prices[s_order]
    d_sorted = bid.charge_prices[d_order]
    s_cum = np.concatenate([[0.0], np.cumsum(np.full(n, qty))])
    s_cost = np.concatenate([[0.0], np.cumsum(s_sorted * qty)])
    d_cum = s_cum
    d_gain = np.concatenate([[0.0], np.cumsum(d_sorted * qty)])

    def fill_cost(cum, val, x):
        # piecewise-linear interpolation of the cumulative fill cost
        return np.interp(x, cum, val)

    coef = eta - 1.0 / eta

    def b_interval(y):
        b_lo = max(0.0, -y)
        b_hi = min(caps_total, caps_total - y)
        if coef < 0.0:
            b_lo = max(b_lo, (hi + y / eta) / coef)
            b_hi = min(b_hi, (lo + y / eta) / coef)
        return b_lo, b_hi

    def best_at(y):
        b_lo, b_hi = b_interval(y)
        if b_lo > b_hi + 1e-12:
            return -np.inf, 0.0
        cands = np.concatenate([[b_lo, b_hi], d_cum, s_cum - y])
        cands = np.clip(cands, b_lo, b_hi)
        vals = -fill_cost(s_cum, s_cost, cands + y) + fill_cost(d_cum, d_gain, cands)
        k = int(np.argmax(vals))
        return float(vals[k]), float(cands[k])

    def objective(y):
        w, _ = best_at(y)
        return (price - sens.f(y)) * y + w

    y_max = min(caps_total, e_prev * eta)
    y_min = -min(caps_total, (params.capacity - e_prev) / eta)
    if eta < 1.0:
        # with the window constraint, mixing charge alongside max discharge
        # never extends the net range; endpoints are the pure extremes
        pass
    a, c = y_min, y_max
    phi = (np.sqrt(5.0) - 1.0) / 2.0
    x1 = c - phi * (c - a)
    x2 = a + phi * (c - a)
    f1, f2 = objective(x1), objective(x2)
    for _ in range(200):
        if c - a <= 1e-9 * max(1.0, abs(a), abs(c)):
            break
        if f1 < f2:
            a, x1, f1 = x1, x2, f2
            x2 = a + phi * (c - a)
            f2 = objective(x2)
        else:
            c, x2, f2 = x2, x1, f1
            x1 = c - phi * (c - a)
            f1 = objective(x1)
    y_best, f_best = (x1, f1) if f1 >= f2 else (x2, f2)
    for y_cand in (y_min, y_max, 0.0):
        if y_min <= y_cand <= y_max and objective(y_cand) > f_best:
            y_best, f_best = y_cand, objective(y_cand)

    _, b_total = best_at(y_best)
    p_total = b_total + y_best
    p = _fill_by_price(s_order, np.full(n, qty), p_total)
    b = _fill_by_price(d_order, np.full(n, qty), b_total)
    realized = price - sens.f(y_best)
    return _finalize(p, b, price, realized, e_prev, params)


def settle_profit(results: list[ClearingResult], params: StorageParams) -> float:
    """Cumulative profit of a cleared run: realized price times net dispatch
    minus operating cost, with the SoC chain checked for consistency."""
    total = 0.0
    prev_soc = None
    for k, r in enumerate(results):
        if prev_soc is not None and abs(r.e_prev - prev_soc) > 1e-6:
            raise ValidationError(f"SoC chain broken between intervals {k - 1} and {k}")
        prev_soc = r.soc_after
        net = r.p_total - r.b_total
        total += r.realized_price * net - float(discharge_cost(params, r.p_total))
    return total
