"""Perturbed decision-focused loss and its gradient in the bid duals.

The loss compares the value of clearing noise-perturbed bids against the
value the hindsight dispatch would have earned under the unperturbed bids.
Its gradient with respect to the duals is the efficiency-weighted gap
between label dispatch and the noise-averaged cleared dispatch, which is
what makes the bid layer trainable despite the piecewise-constant clearing.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .bids import bids_from_anchored, form_bids, perturb_bids
from .clearing import clear_price_maker, clear_price_taker
from .domain import PRICE_TAKER, Sample, SensitivityModel, StorageParams

__all__ = [
    "LossConfig",
    "LossValue",
    "perturbed_loss_and_grad",
    "anchored_loss_and_grad",
    "chain_gradient",
    "label_segments",
]


@dataclass(frozen=True)
class LossConfig:
    """epsilon is the perturbation scale in the duals' units ($/MWh);
    num_samples is the Monte-Carlo draw count K."""

    epsilon: float = 1.0
    num_samples: int = 1
    rng_seed: int = 0

    def __post_init__(self):
        if self.epsilon <= 0.0:
            raise ValueError("epsilon must be positive")
        if self.num_samples < 1:
            raise ValueError("num_samples must be at least 1")


@dataclass(frozen=True)
class LossValue:
    loss: float
    grad_theta: np.ndarray


def label_segments(total: float, num_segments: int, seg_quantity: float) -> np.ndarray:
    """Split a dispatch total across segments, filling segment 1 first."""
    out = np.zeros(num_segments)
    remaining = total
    for j in range(num_segments):
        take = min(remaining, seg_quantity)
        out[j] = take
        remaining -= take
        if remaining <= 0.0:
            break
    return out


def _clearing_value(res, bid) -> float:
    return res.realized_price * (res.p_total - res.b_total) - float(
        bid.discharge_prices @ res.p_seg - bid.charge_prices @ res.b_seg
    )


def perturbed_loss_and_grad(
    theta,
    sample: Sample,
    params: StorageParams,
    cfg: LossConfig,
    sens: SensitivityModel = PRICE_TAKER,
    seed=None,
) -> LossValue:
    """Monte-Carlo loss and gradient at one sample's first horizon interval.

    Each of the K draws perturbs the duals with scaled standard-normal noise,
    forms bids, and clears them against the first actual price starting from
    the label's entering SoC. The subtracted reference term prices the label
    dispatch at the unperturbed bids. The gradient per segment is

        (label_p / eta - label_b * eta) - mean(cleared_p / eta - cleared_b * eta)

    with the label totals split across segments in fill-first order. Noise is
    drawn from ``seed`` (default: cfg.rng_seed), so repeated calls with the
    same configuration are bit-identical, and finite differences in theta can
    share the draws.
    """
    theta = np.asarray(theta, dtype=float)
    n = theta.size
    eta = params.efficiency
    price = float(sample.actual_prices[0])
    e_prev = float(sample.label_e_prev)
    rng = np.random.default_rng(cfg.rng_seed if seed is None else seed)

    qty = params.power_rating / n
    p_bar = label_segments(float(sample.label_p[0]), n, qty)
    b_bar = label_segments(float(sample.label_b[0]), n, qty)

    value_sum = 0.0
    cleared_sum = np.zeros(n)
    for _ in range(cfg.num_samples):
        Z = rng.standard_normal(n)
        bid = perturb_bids(theta, cfg.epsilon, Z, params)
        if sens.kind == "price_taker":
            res = clear_price_taker(bid, price, e_prev, params)
        else:
            res = clear_price_maker(bid, price, sens, e_prev, params)
        value_sum += _clearing_value(res, bid)
        cleared_sum += res.p_seg / eta - res.b_seg * eta

    ref_bid = form_bids(theta, params)
    if sens.kind == "price_taker":
        ref_price = price
    else:
        ref_price = price - sens.f(float(sample.label_p[0] - sample.label_b[0]))
    ref_value = ref_price * (p_bar.sum() - b_bar.sum()) - float(
        ref_bid.discharge_prices @ p_bar - ref_bid.charge_prices @ b_bar
    )

    k = cfg.num_samples
    loss = value_sum / k - ref_value
    grad = (p_bar / eta - b_bar * eta) - cleared_sum / k
    return LossValue(loss=float(loss), grad_theta=grad)


def anchored_loss_and_grad(
    theta_s,
    theta_d,
    sample: Sample,
    params: StorageParams,
    cfg: LossConfig,
    sens: SensitivityModel = PRICE_TAKER,
    seed=None,
) -> LossValue:
    """Loss and gradient for bids anchored at the label's entering SoC.

    Same construction as :func:`perturbed_loss_and_grad`, but the curve
    carries separate duals for the discharge slices below e_prev and the
    charge slices above it. The gradient is the 2N vector

        [ (label_p - cleared_p) / eta ,  -(label_b - cleared_b) * eta ]

    ordered discharge slices first, matching the concatenated dual vector.
    """
    theta_s = np.asarray(theta_s, dtype=float)
    theta_d = np.asarray(theta_d, dtype=float)
    n = theta_s.size
    eta = params.efficiency
    price = float(sample.actual_prices[0])
    e_prev = float(sample.label_e_prev)
    rng = np.random.default_rng(cfg.rng_seed if seed is None else seed)

    qty = params.power_rating / n
    p_bar = label_segments(float(sample.label_p[0]), n, qty)
    b_bar = label_segments(float(sample.label_b[0]), n, qty)

    value_sum = 0.0
    cleared_p = np.zeros(n)
    cleared_b = np.zeros(n)
    for _ in range(cfg.num_samples):
        Z = rng.standard_normal(2 * n)
        bid = bids_from_anchored(
            theta_s + cfg.epsilon * Z[:n], theta_d + cfg.epsilon * Z[n:], e_prev, params
        )
        if sens.kind == "price_taker":
            res = clear_price_taker(bid, price, e_prev, params)
        else:
            res = clear_price_maker(bid, price, sens, e_prev, params)
        value_sum += _clearing_value(res, bid)
        cleared_p += res.p_seg
        cleared_b += res.b_seg

    ref_bid = bids_from_anchored(theta_s, theta_d, e_prev, params)
    if sens.kind == "price_taker":
        ref_price = price
    else:
        ref_price = price - sens.f(float(sample.label_p[0] - sample.label_b[0]))
    ref_value = ref_price * (p_bar.sum() - b_bar.sum()) - float(
        ref_bid.discharge_prices @ p_bar - ref_bid.charge_prices @ b_bar
    )

    k = cfg.num_samples
    loss = value_sum / k - ref_value
    grad = np.concatenate(
        [(p_bar - cleared_p / k) / eta, -(b_bar - cleared_b / k) * eta]
    )
    return LossValue(loss=float(loss), grad_theta=grad)


def chain_gradient(dl_dtheta, dtheta_dprice, dprice_dw) -> np.ndarray:
    """Row-vector chain rule: dL/dw = dL/dtheta . dtheta/dprice . dprice/dw."""
    dl_dtheta = np.asarray(dl_dtheta, dtype=float)
    dtheta_dprice = np.asarray(dtheta_dprice, dtype=float)
    dprice_dw = np.asarray(dprice_dw, dtype=float)
    if dl_dtheta.ndim != 1 or dtheta_dprice.shape[0] != dl_dtheta.size:
        raise ValueError("dL/dtheta length must match dtheta/dprice rows")
    if dtheta_dprice.shape[1] != dprice_dw.shape[0]:
        raise ValueError("dtheta/dprice columns must match dprice/dw rows")
    return (dl_dtheta @ dtheta_dprice) @ dprice_dw
