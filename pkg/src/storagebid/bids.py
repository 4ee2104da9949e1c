"""Turn SoC-transition duals into segmented charge/discharge bid curves.

A bid window covers the interval being bid plus the predicted lookahead; the
opportunity value of stored energy accrues strictly after the bid interval,
so the duals are computed on the window's tail. Discharge bids add the
marginal operating cost to the efficiency-adjusted opportunity value;
charge bids are the opportunity value scaled down by efficiency.
"""

from __future__ import annotations

import logging

import numpy as np

from .arbitrage import solve_arbitrage_batch
from .domain import BidCurve, StorageParams, marginal_discharge_cost, soc_grid

__all__ = [
    "compute_theta_segments",
    "form_bids",
    "perturb_bids",
    "anchored_levels",
    "anchored_theta",
    "bids_from_anchored",
    "anchored_bid_curve",
]

log = logging.getLogger(__name__)


def compute_theta_segments(prices, params: StorageParams, soc_levels) -> np.ndarray:
    """Opportunity dual at each SoC level for one bid window.

    theta_j is the first SoC-transition dual of the program over the window's
    tail (everything after the interval being bid), started at soc_levels[j].
    A window with no tail has no remaining opportunity, so theta is zero.
    """
    prices = np.asarray(prices, dtype=float)
    soc_levels = np.asarray(soc_levels, dtype=float)
    if prices.size <= 1:
        return np.zeros(soc_levels.size)
    sols = solve_arbitrage_batch(prices[1:], params, soc_levels)
    return np.array([s.theta[0] for s in sols])


def _discharge_prices(theta, params: StorageParams) -> np.ndarray:
    return marginal_discharge_cost(params) + theta / params.efficiency


def _charge_prices(theta, params: StorageParams) -> np.ndarray:
    return theta * params.efficiency


def form_bids(theta, params: StorageParams, soc_levels=None) -> BidCurve:
    """Bid curve from opportunity duals on a symmetric SoC grid.

    S_j
        marginal discharge cost at the margin of starting to discharge
        (p = 0) plus theta_j / eta.
    D_j
        theta_j * eta; the stated cost forms carry no charging cost term.

    Segments are not re-sorted: monotone theta gives monotone curves, and the
    clearing logic is order-free regardless.
    """
    theta = np.asarray(theta, dtype=float)
    n = theta.size
    if soc_levels is None:
        if n != params.num_segments:
            raise ValueError("theta length does not match params.num_segments")
        soc_levels = soc_grid(params)
    return BidCurve(
        discharge_prices=_discharge_prices(theta, params),
        charge_prices=_charge_prices(theta, params),
        seg_quantity=params.power_rating / n,
        soc_levels=np.asarray(soc_levels, dtype=float),
    )


def perturb_bids(theta, epsilon: float, Z, params: StorageParams, soc_levels=None) -> BidCurve:
    """Bid curve from additively perturbed duals theta + epsilon * Z.

    Z is a standard-normal vector supplied by the caller, which keeps the
    noise stream explicit and runs reproducible.
    """
    if epsilon <= 0.0:
        raise ValueError("perturbation scale must be positive")
    theta = np.asarray(theta, dtype=float)
    Z = np.asarray(Z, dtype=float)
    if Z.shape != theta.shape:
        raise ValueError("noise vector shape does not match theta")
    return form_bids(theta + epsilon * Z, params, soc_levels=soc_levels)


def anchored_levels(e_prev: float, params: StorageParams) -> tuple[np.ndarray, np.ndarray]:
    """Midpoint SoC of each power slice below (discharge) and above (charge)
    the live SoC, clipped to the storage bounds."""
    n = params.num_segments
    qty = params.power_rating / n
    eta = params.efficiency
    offsets = (np.arange(n) + 0.5) * qty
    down = np.clip(e_prev - offsets / eta, 0.0, params.capacity)
    up = np.clip(e_prev + offsets * eta, 0.0, params.capacity)
    return down, up


def anchored_theta(prices, e_prev: float, params: StorageParams) -> tuple[np.ndarray, np.ndarray]:
    """Opportunity duals of the discharge and charge slices anchored at
    e_prev, solved on the bid window's tail in one batch."""
    prices = np.asarray(prices, dtype=float)
    n = params.num_segments
    down, up = anchored_levels(e_prev, params)
    if prices.size <= 1:
        return np.zeros(n), np.zeros(n)
    sols = solve_arbitrage_batch(prices[1:], params, np.concatenate([down, up]))
    theta = np.array([s.theta[0] for s in sols])
    return theta[:n], theta[n:]


def bids_from_anchored(theta_s, theta_d, e_prev: float, params: StorageParams) -> BidCurve:
    """Assemble the anchored curve from per-slice duals (no solving)."""
    theta_s = np.asarray(theta_s, dtype=float)
    theta_d = np.asarray(theta_d, dtype=float)
    n = params.num_segments
    if theta_s.size != n or theta_d.size != n:
        raise ValueError("anchored theta vectors must have num_segments entries")
    down, up = anchored_levels(e_prev, params)
    return BidCurve(
        discharge_prices=_discharge_prices(theta_s, params),
        charge_prices=_charge_prices(theta_d, params),
        seg_quantity=params.power_rating / n,
        soc_levels=down,
        charge_levels=up,
    )


def anchored_bid_curve(prices, e_prev: float, params: StorageParams) -> BidCurve:
    """Bid curve whose segments are power slices anchored at the live SoC.

    Discharge segment j covers the j-th slice of stored energy drained by
    seg_quantity of discharge (width seg_quantity / eta below e_prev), and
    charge segment j the j-th slice of headroom filled by seg_quantity of
    charge (width seg_quantity * eta above e_prev). Each slice is priced at
    the opportunity dual of its midpoint, so the discharge curve rises and
    the charge curve falls with cumulative quantity and the two never cross.
    Slices that run past the SoC bounds are valued at the clipped level; the
    clearing window keeps them from dispatching.
    """
    theta_s, theta_d = anchored_theta(prices, e_prev, params)
    curve = bids_from_anchored(theta_s, theta_d, e_prev, params)
    if np.any(np.diff(curve.discharge_prices) < -1e-9):
        log.info("anchored bid curve has non-monotone discharge prices (degenerate duals)")
    return curve
