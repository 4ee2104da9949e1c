"""Finite-difference verification suites for the two analytic gradients.

These drive the dual Jacobian and the perturbed-loss gradient against
numerical differentiation on seeded random instances. The CLI exposes them
as the ``gradcheck`` command; the acceptance tests run the same checks at
their published sizes.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .bids import compute_theta_segments
from .domain import PRICE_TAKER, FeatureWindow, Sample, SensitivityModel, StorageParams, soc_grid
from .kktdiff import theta_jacobian
from .loss import LossConfig, perturbed_loss_and_grad

__all__ = [
    "fd_theta_jacobian",
    "random_window",
    "jacobian_check",
    "JacobianCheck",
    "loss_gradient_check",
    "LossCheck",
]


def random_window(T: int, rng: np.random.Generator, base: float = 40.0) -> np.ndarray:
    """Busy price window: daily shape, noise, random phase."""
    period = rng.choice([6.0, 12.0, 24.0])
    phase = rng.uniform(0.0, 2.0 * np.pi)
    return np.maximum(
        base
        + 15.0 * np.sin(np.arange(T) / period * 2.0 * np.pi + phase)
        + rng.normal(0.0, 8.0, T),
        1.0,
    )


def fd_theta_jacobian(prices, params: StorageParams, soc_levels, delta: float = 1e-4):
    """Central differences of the opportunity duals, plus a straddle mask.

    Returns (central, straddle) where straddle marks entries whose forward
    and backward one-sided differences disagree, the signature of a dual
    breakpoint inside the bump.
    """
    prices = np.asarray(prices, dtype=float)
    soc_levels = np.asarray(soc_levels, dtype=float)
    T = prices.size
    N = soc_levels.size
    fwd = np.zeros((N, T))
    bwd = np.zeros((N, T))
    base = compute_theta_segments(prices, params, soc_levels)
    for j in range(1, T):
        up, down = prices.copy(), prices.copy()
        up[j] += delta
        down[j] -= delta
        t_up = compute_theta_segments(up, params, soc_levels)
        t_dn = compute_theta_segments(down, params, soc_levels)
        fwd[:, j] = (t_up - base) / delta
        bwd[:, j] = (base - t_dn) / delta
    central = 0.5 * (fwd + bwd)
    scale = max(np.abs(central).max(), 1.0)
    straddle = np.abs(fwd - bwd) > 1e-2 * scale
    return central, straddle


@dataclass(frozen=True)
class JacobianCheck:
    max_rel_err: float
    rows_checked: int
    rows_flagged: int
    entries_straddled: int


def jacobian_check(
    params: StorageParams,
    T: int = 24,
    instances: int = 5,
    seed: int = 0,
    delta: float = 1e-4,
) -> JacobianCheck:
    """Compare theta_jacobian against finite differences on random windows.

    The error is the worst entry deviation relative to the Jacobian scale,
    over unflagged rows and non-straddled entries.
    """
    rng = np.random.default_rng(seed)
    levels = soc_grid(params)
    worst = 0.0
    checked = flagged = straddled = 0
    for _ in range(instances):
        prices = random_window(T, rng)
        jac = theta_jacobian(prices, params, levels)
        central, straddle = fd_theta_jacobian(prices, params, levels, delta)
        ok_rows = ~jac.degenerate
        flagged += int(jac.degenerate.sum())
        checked += int(ok_rows.sum())
        straddled += int(straddle[ok_rows].sum())
        usable = ok_rows[:, None] & ~straddle
        scale = max(np.abs(central).max(), np.abs(jac.matrix).max(), 1.0)
        diff = np.where(usable, np.abs(jac.matrix - central), 0.0)
        worst = max(worst, float(diff.max() / scale))
    return JacobianCheck(
        max_rel_err=worst,
        rows_checked=checked,
        rows_flagged=flagged,
        entries_straddled=straddled,
    )


@dataclass(frozen=True)
class LossCheck:
    max_sigma_distance: float
    coords_checked: int


def _toy_sample(params: StorageParams, rng: np.random.Generator, horizon: int = 6) -> Sample:
    prices = random_window(horizon, rng)
    p_lab = rng.uniform(0.0, params.power_rating)
    b_lab = rng.uniform(0.0, params.power_rating) if rng.random() < 0.5 else 0.0
    if p_lab > 0 and b_lab > 0:
        b_lab = 0.0
    e_prev = rng.uniform(0.2, 0.8) * params.capacity
    p_lab = min(p_lab, e_prev * params.efficiency)
    b_lab = min(b_lab, (params.capacity - e_prev) / params.efficiency)
    label_p = np.zeros(horizon)
    label_b = np.zeros(horizon)
    label_p[0] = p_lab
    label_b[0] = b_lab
    x = np.tile(prices.mean(), 24)
    return Sample(
        features=FeatureWindow(x=x, target=np.resize(prices, 24)),
        label_p=label_p,
        label_b=label_b,
        label_e_prev=e_prev,
        actual_prices=prices,
    )


def loss_gradient_check(
    params: StorageParams,
    samples: int = 3,
    draws: int = 2000,
    delta: float = 0.05,
    seed: int = 0,
    sens: SensitivityModel = PRICE_TAKER,
    epsilon: float = 1.0,
) -> LossCheck:
    """Common-random-number finite differences of the Monte-Carlo loss.

    For each dual coordinate the centered difference of the loss, evaluated
    with the same noise draws on both sides, is compared with the analytic
    gradient. The yardstick is the standard error of the per-draw finite
    differences themselves, which is what the shared-noise estimator
    actually fluctuates by.
    """
    from .bids import perturb_bids
    from .clearing import clear_price_maker, clear_price_taker
    from .loss import _clearing_value, label_segments

    rng = np.random.default_rng(seed)
    n = params.num_segments
    eta = params.efficiency
    qty = params.power_rating / n
    worst = 0.0
    checked = 0
    for s_idx in range(samples):
        sample = _toy_sample(params, rng)
        theta = np.sort(rng.uniform(0.0, 60.0, n))[::-1].copy()
        sub_seed = seed + 1000 + s_idx
        cfg = LossConfig(epsilon=epsilon, num_samples=draws, rng_seed=sub_seed)
        analytic = perturbed_loss_and_grad(theta, sample, params, cfg, sens=sens).grad_theta

        price = float(sample.actual_prices[0])
        e_prev = float(sample.label_e_prev)
        # replicate the loss's noise stream draw for draw
        noise = np.random.default_rng(sub_seed)
        Zs = np.stack([noise.standard_normal(n) for _ in range(draws)])

        def clearing_value_at(th, Z):
            bid = perturb_bids(th, epsilon, Z, params)
            if sens.kind == "price_taker":
                res = clear_price_taker(bid, price, e_prev, params)
            else:
                res = clear_price_maker(bid, price, sens, e_prev, params)
            return _clearing_value(res, bid)

        p_bar = label_segments(float(sample.label_p[0]), n, qty)
        b_bar = label_segments(float(sample.label_b[0]), n, qty)
        dref = -(p_bar / eta - b_bar * eta)

        for j in range(n):
            up = theta.copy()
            up[j] += delta
            down = theta.copy()
            down[j] -= delta
            fd_draws = np.empty(draws)
            for m in range(draws):
                fd_draws[m] = (
                    clearing_value_at(up, Zs[m]) - clearing_value_at(down, Zs[m])
                ) / (2.0 * delta)
            fd = fd_draws.mean() - dref[j]
            se = fd_draws.std(ddof=1) / np.sqrt(draws)
            dist = abs(fd - analytic[j]) / max(se, 1e-9)
            worst = max(worst, float(dist))
            checked += 1
    return LossCheck(max_sigma_distance=worst, coords_checked=checked)
