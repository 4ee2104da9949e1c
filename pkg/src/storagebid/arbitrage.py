"""Horizon storage-arbitrage programs with full dual recovery.

The core program maximizes sum_t price_t*(p_t - b_t) - cost(p_t) over the
storage feasibility set (power bounds, SoC bounds, SoC transition chain).
All solves go through the interior-point engine in :mod:`storagebid.qp` so
that the transition duals theta and every bound dual come back converged;
downstream modules differentiate through them.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .domain import (
    PRICE_TAKER,
    ArbSolution,
    SensitivityModel,
    StorageParams,
    ValidationError,
    discharge_cost,
)
from .qp import QpResult, SolverError, solve_box_qp

__all__ = [
    "ArbProblem",
    "SolverError",
    "solve_arbitrage",
    "solve_arbitrage_batch",
    "solve_hindsight",
    "solve_hindsight_pricemaker",
    "opportunity_value",
    "kkt_residuals",
]


@dataclass(frozen=True)
class ArbProblem:
    """A horizon arbitrage instance: prices, storage parameters, starting SoC."""

    prices: np.ndarray
    params: StorageParams
    initial_soc: float | None = None
    sensitivity: SensitivityModel = PRICE_TAKER

    def __post_init__(self):
        object.__setattr__(self, "prices", np.asarray(self.prices, dtype=float))
        if self.prices.ndim != 1 or self.prices.size < 1:
            raise ValidationError("prices must be a nonempty 1-D vector")
        if not np.all(np.isfinite(self.prices)):
            raise ValidationError("prices must be finite")

    @property
    def e0(self) -> float:
        return self.params.initial_soc if self.initial_soc is None else self.initial_soc


def _transition_matrix(T: int, eta: float) -> np.ndarray:
    """Equality rows: p_t/eta - b_t*eta + e_t - e_{t-1} = (e0 if t == 0 else 0)."""
    A = np.zeros((T, 3 * T))
    idx = np.arange(T)
    A[idx, idx] = 1.0 / eta
    A[idx, T + idx] = -eta
    A[idx, 2 * T + idx] = 1.0
    A[idx[1:], 2 * T + idx[:-1]] = -1.0
    return A


def _bounds(T: int, params: StorageParams):
    lb = np.zeros(3 * T)
    ub = np.concatenate(
        [
            np.full(T, params.power_rating),
            np.full(T, params.power_rating),
            np.full(T, params.capacity),
        ]
    )
    return lb, ub


def _quadratic_terms(T: int, params: StorageParams, sens: SensitivityModel):
    """Hessian of the negated objective, or None when the program is an LP."""
    c2 = params.cost_quadratic
    if c2 == 0.0 and sens.kind != "linear":
        return None
    Q = np.zeros((3 * T, 3 * T))
    idx = np.arange(T)
    Q[idx, idx] += 2.0 * c2
    if sens.kind == "linear":
        a2 = 2.0 * sens.alpha
        Q[idx, idx] += a2
        Q[T + idx, T + idx] += a2
        Q[idx, T + idx] -= a2
        Q[T + idx, idx] -= a2
    return Q


def _solution_from_result(res: QpResult, T: int, objective: float) -> ArbSolution:
    z = res.z
    return ArbSolution(
        p=z[:T],
        b=z[T : 2 * T],
        e=z[2 * T :],
        theta=res.y,
        u_lo=res.mu_lo[:T],
        u_hi=res.mu_hi[:T],
        v_lo=res.mu_lo[T : 2 * T],
        v_hi=res.mu_hi[T : 2 * T],
        w_lo=res.mu_lo[2 * T :],
        w_hi=res.mu_hi[2 * T :],
        objective=float(objective),
    )


def solve_arbitrage_batch(
    prices: np.ndarray,
    params: StorageParams,
    initial_socs,
    *,
    linear_alpha: float = 0.0,
) -> list[ArbSolution]:
    """Solve one program per (price row, starting SoC) pair.

    prices may be (T,) shared across the batch or (B, T); initial_socs is a
    scalar or (B,). The pairs are solved simultaneously inside one
    interior-point iteration, which is where the per-SoC-level and
    finite-difference sweeps spend their time.
    """
    prices = np.asarray(prices, dtype=float)
    e0 = np.atleast_1d(np.asarray(initial_socs, dtype=float))
    if prices.ndim == 1:
        prices = prices[None, :]
    B = max(prices.shape[0], e0.shape[0])
    T = prices.shape[1]
    prices = np.broadcast_to(prices, (B, T))
    e0 = np.broadcast_to(e0, (B,))

    sens = SensitivityModel("linear", linear_alpha) if linear_alpha > 0.0 else PRICE_TAKER
    A = _transition_matrix(T, params.efficiency)
    lb, ub = _bounds(T, params)
    Q = _quadratic_terms(T, params, sens)
    c = np.concatenate(
        [params.cost_linear - prices, prices, np.zeros((B, T))], axis=1
    )
    b_eq = np.zeros((B, T))
    b_eq[:, 0] = e0

    res = solve_box_qp(c, A, b_eq, lb, ub, Q=Q)
    if not np.all(res.converged):
        bad = np.flatnonzero(~res.converged)
        raise SolverError(
            f"arbitrage solve failed to converge for batch rows {bad.tolist()} "
            f"after {res.iterations} iterations"
        )
    sols = []
    for i in range(B):
        p = res.z[i, :T]
        bch = res.z[i, T : 2 * T]
        y = p - bch
        revenue = np.sum((prices[i] - sens.f(y)) * y)
        obj = revenue - np.sum(discharge_cost(params, p))
        row = QpResult(
            res.z[i], res.y[i], res.mu_lo[i], res.mu_hi[i], res.objective[i],
            res.iterations, res.converged[i : i + 1],
        )
        sols.append(_solution_from_result(row, T, obj))
    return sols


def solve_arbitrage(prob: ArbProblem) -> ArbSolution:
    """Optimal dispatch and duals for predicted prices (price-taker form)."""
    if prob.sensitivity.kind != "price_taker":
        raise ValidationError("solve_arbitrage expects a price-taker problem")
    return solve_arbitrage_batch(prob.prices, prob.params, prob.e0)[0]


def solve_hindsight(
    prices, params: StorageParams, initial_soc: float | None = None
) -> ArbSolution:
    """Same program with actual prices substituted for predictions."""
    return solve_arbitrage(ArbProblem(np.asarray(prices, dtype=float), params, initial_soc))


def opportunity_value(prices, params: StorageParams, initial_soc: float) -> float:
    """Optimal objective of the arbitrage program over the remaining horizon,
    starting from the given SoC. An empty horizon is worth nothing."""
    prices = np.asarray(prices, dtype=float)
    if prices.size == 0:
        return 0.0
    return solve_arbitrage(ArbProblem(prices, params, initial_soc)).objective


def _pricemaker_objective(z, prices, params, sens, T):
    p = z[:T]
    b = z[T : 2 * T]
    y = p - b
    return float(np.sum((prices - sens.f(y)) * y) - np.sum(discharge_cost(params, p)))


def _pricemaker_gradient(z, prices, params, sens, T):
    p = z[:T]
    b = z[T : 2 * T]
    y = p - b
    r = sens.revenue_gradient(prices, y)
    g = np.zeros_like(z)
    g[:T] = r - params.cost_linear - 2.0 * params.cost_quadratic * p
    g[T : 2 * T] = -r
    return g


def solve_hindsight_pricemaker(
    prices,
    sensitivity: SensitivityModel,
    params: StorageParams,
    initial_soc: float | None = None,
    *,
    max_iter: int = 500,
    first_order_tol: float = 1e-6,
) -> ArbSolution:
    """Hindsight dispatch when the storage moves the price it clears at.

    Linear sensitivity keeps the program a concave QP and is solved directly.
    The cubic model is smooth but quartic in the net dispatch, so it runs
    projected gradient ascent with Armijo backtracking from the price-taker
    solution; duals are then recovered by re-solving the price-taker program
    at the effective marginal prices of the optimum.
    """
    prices = np.asarray(prices, dtype=float)
    e0 = params.initial_soc if initial_soc is None else initial_soc
    if sensitivity.kind == "price_taker":
        return solve_hindsight(prices, params, e0)
    if sensitivity.kind == "linear":
        sol = solve_arbitrage_batch(
            prices, params, e0, linear_alpha=sensitivity.alpha
        )[0]
        return sol

    T = prices.size
    A = _transition_matrix(T, params.efficiency)
    lb, ub = _bounds(T, params)
    b_eq = np.zeros(T)
    b_eq[0] = e0
    eye = np.eye(3 * T)

    def project(v):
        res = solve_box_qp(-v, A, b_eq, lb, ub, Q=eye)
        return res.z

    z = solve_hindsight(prices, params, e0)
    z = np.concatenate([z.p, z.b, z.e])
    step = 1.0 / (12.0 * sensitivity.alpha * params.power_rating**2
                  + 2.0 * params.cost_quadratic + 1.0)
    fz = _pricemaker_objective(z, prices, params, sensitivity, T)
    for _ in range(max_iter):
        g = _pricemaker_gradient(z, prices, params, sensitivity, T)
        residual = np.abs(z - project(z + g)).max()
        if residual <= first_order_tol:
            break
        t = step
        for _ in range(40):
            z_new = project(z + t * g)
            f_new = _pricemaker_objective(z_new, prices, params, sensitivity, T)
            if f_new >= fz + 1e-4 * np.dot(g, z_new - z):
                break
            t *= 0.5
        if np.abs(z_new - z).max() <= 1e-14:
            break
        z, fz = z_new, f_new
    else:
        raise SolverError("projected gradient did not reach first-order tolerance")

    # Duals: at the optimum the program coincides, to first order, with a
    # price-taker program priced at the revenue gradient; its multipliers are
    # valid KKT multipliers here.
    y_net = z[:T] - z[T : 2 * T]
    eff = sensitivity.revenue_gradient(prices, y_net)
    recovered = solve_hindsight(eff, params, e0)
    z_rec = np.concatenate([recovered.p, recovered.b, recovered.e])
    f_rec = _pricemaker_objective(z_rec, prices, params, sensitivity, T)
    if f_rec >= fz - 1e-9:
        z, fz = z_rec, f_rec
    return ArbSolution(
        p=z[:T],
        b=z[T : 2 * T],
        e=z[2 * T :],
        theta=recovered.theta,
        u_lo=recovered.u_lo,
        u_hi=recovered.u_hi,
        v_lo=recovered.v_lo,
        v_hi=recovered.v_hi,
        w_lo=recovered.w_lo,
        w_hi=recovered.w_hi,
        objective=fz,
    )


def kkt_residuals(
    sol: ArbSolution,
    prices,
    params: StorageParams,
    initial_soc: float,
    sensitivity: SensitivityModel = PRICE_TAKER,
) -> dict[str, float]:
    """Max-norm residuals of the optimality system at ``sol``.

    For price-maker solutions the stationarity rows use the revenue gradient
    in place of the raw price.
    """
    prices = np.asarray(prices, dtype=float)
    eta = params.efficiency
    R = params.power_rating
    E = params.capacity
    y_net = sol.p - sol.b
    lam = sensitivity.revenue_gradient(prices, y_net)

    stat_p = lam - (params.cost_linear + 2.0 * params.cost_quadratic * sol.p) \
        - sol.theta / eta - sol.u_hi + sol.u_lo
    stat_b = -lam + sol.theta * eta - sol.v_hi + sol.v_lo
    theta_next = np.append(sol.theta[1:], 0.0)
    stat_e = -sol.theta + theta_next - sol.w_hi + sol.w_lo

    e_prev = np.concatenate([[initial_soc], sol.e[:-1]])
    primal = np.abs(sol.e - e_prev + sol.p / eta - sol.b * eta)
    bound = np.concatenate(
        [
            np.maximum(0.0, -sol.p), np.maximum(0.0, sol.p - R),
            np.maximum(0.0, -sol.b), np.maximum(0.0, sol.b - R),
            np.maximum(0.0, -sol.e), np.maximum(0.0, sol.e - E),
        ]
    )
    dual = np.concatenate(
        [
            np.maximum(0.0, -d)
            for d in (sol.u_lo, sol.u_hi, sol.v_lo, sol.v_hi, sol.w_lo, sol.w_hi)
        ]
    )
    comp = np.concatenate(
        [
            sol.u_hi * (R - sol.p), sol.u_lo * sol.p,
            sol.v_hi * (R - sol.b), sol.v_lo * sol.b,
            sol.w_hi * (E - sol.e), sol.w_lo * sol.e,
        ]
    )
    return {
        "stationarity": float(
            max(np.abs(stat_p).max(), np.abs(stat_b).max(), np.abs(stat_e).max())
        ),
        "primal": float(max(primal.max(), bound.max())),
        "dual": float(dual.max()),
        "complementarity": float(np.abs(comp).max()),
    }
