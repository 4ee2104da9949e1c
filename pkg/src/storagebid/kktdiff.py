"""Differentiate SoC-transition duals with respect to predicted prices.

The optimality system of a solved horizon program is linearized around the
solution and the resulting square system is solved against unit price
perturbations. Block order, for both rows and columns, is

    (dp, db, de, dtheta, du_hi, du_lo, dv_hi, dv_lo, dw_hi, dw_lo)

with a superdiagonal shift linking consecutive transition duals. A quadratic
discharge cost contributes a -2*C2*I block in the first row's dp column so
the differentiated stationarity row stays exact; with C2 = 0 the matrix
carries only the efficiency, shift, and complementarity entries.

Dual maps of LPs are piecewise constant between active-set changes, so the
matrix goes singular exactly at breakpoints. Those solves fall back to a
minimum-norm least-squares solution and are flagged degenerate; callers skip
the flagged rows rather than trusting them.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy.linalg import lu_factor, lu_solve

from .arbitrage import solve_arbitrage_batch
from .domain import ArbSolution, StorageParams

__all__ = [
    "KktJacobian",
    "DualSensitivity",
    "ThetaJacobian",
    "assemble_kkt_jacobian",
    "dual_price_sensitivity",
    "theta_jacobian",
]

log = logging.getLogger(__name__)

_STRICT_COMP_TOL = 1e-3


@dataclass(frozen=True)
class KktJacobian:
    matrix: np.ndarray
    rhs: np.ndarray


@dataclass(frozen=True)
class DualSensitivity:
    """d(theta)/d(price) for one solved horizon, with a degeneracy flag."""

    matrix: np.ndarray
    degenerate: bool


@dataclass(frozen=True)
class ThetaJacobian:
    """Stacked first-transition dual gradients, one row per SoC level."""

    matrix: np.ndarray
    degenerate: np.ndarray

    @property
    def num_degenerate(self) -> int:
        return int(self.degenerate.sum())


def _shift(T: int) -> np.ndarray:
    return np.eye(T, k=1)


def assemble_kkt_jacobian(
    sol: ArbSolution, params: StorageParams, prices
) -> KktJacobian:
    """Total-derivative system of the optimality conditions at ``sol``."""
    prices = np.asarray(prices, dtype=float)
    T = sol.horizon
    if prices.size != T:
        raise ValueError("price vector does not match the solution horizon")
    eta = params.efficiency
    R = params.power_rating
    E = params.capacity
    I = np.eye(T)
    G = _shift(T)

    def blk(i: int, j: int):
        return (slice(i * T, (i + 1) * T), slice(j * T, (j + 1) * T))

    A = np.zeros((10 * T, 10 * T))
    # d stationarity wrt p
    if params.cost_quadratic != 0.0:
        A[blk(0, 0)] = -2.0 * params.cost_quadratic * I
    A[blk(0, 3)] = -I / eta
    A[blk(0, 4)] = -I
    A[blk(0, 5)] = I
    # d stationarity wrt b
    A[blk(1, 3)] = eta * I
    A[blk(1, 6)] = -I
    A[blk(1, 7)] = I
    # d stationarity wrt e
    A[blk(2, 3)] = G - I
    A[blk(2, 8)] = -I
    A[blk(2, 9)] = I
    # d SoC transition
    A[blk(3, 0)] = I / eta
    A[blk(3, 1)] = -eta * I
    A[blk(3, 2)] = I - G.T
    # d complementarity, one slack-dual pair per bound
    A[blk(4, 0)] = -np.diag(sol.u_hi)
    A[blk(4, 4)] = np.diag(R - sol.p)
    A[blk(5, 0)] = np.diag(sol.u_lo)
    A[blk(5, 5)] = np.diag(sol.p)
    A[blk(6, 1)] = -np.diag(sol.v_hi)
    A[blk(6, 6)] = np.diag(R - sol.b)
    A[blk(7, 1)] = np.diag(sol.v_lo)
    A[blk(7, 7)] = np.diag(sol.b)
    A[blk(8, 2)] = -np.diag(sol.w_hi)
    A[blk(8, 8)] = np.diag(E - sol.e)
    A[blk(9, 2)] = np.diag(sol.w_lo)
    A[blk(9, 9)] = np.diag(sol.e)

    rhs = np.zeros((10 * T, T))
    rhs[0:T, :] = -I
    rhs[T : 2 * T, :] = I
    return KktJacobian(matrix=A, rhs=rhs)


def _breakpoint_pair(sol: ArbSolution, params: StorageParams, prices) -> bool:
    """True when some bound has both its slack and its dual near zero.

    That is the signature of sitting on an active-set breakpoint, where the
    dual map has a kink and the linearization is not trustworthy. Slacks are
    judged on the quantity scale, duals on the price scale.
    """
    R = params.power_rating
    E = params.capacity
    s_tol = _STRICT_COMP_TOL * max(R, E, 1.0)
    m_tol = _STRICT_COMP_TOL * (1.0 + float(np.abs(prices).max()))
    pairs = [
        (R - sol.p, sol.u_hi), (sol.p, sol.u_lo),
        (R - sol.b, sol.v_hi), (sol.b, sol.v_lo),
        (E - sol.e, sol.w_hi), (sol.e, sol.w_lo),
    ]
    for slack, dual in pairs:
        if np.any((np.abs(slack) < s_tol) & (np.abs(dual) < m_tol)):
            return True
    return False


def _solve_sensitivity(
    sol: ArbSolution, params: StorageParams, prices, rows
) -> DualSensitivity:
    """Solve the linearized system; verify the requested dtheta rows are
    determined (degenerate active sets make the system singular with the
    answer unique only in some coordinates)."""
    prices = np.asarray(prices, dtype=float)
    T = sol.horizon
    jac = assemble_kkt_jacobian(sol, params, prices)
    degenerate = _breakpoint_pair(sol, params, prices)
    X = None
    if not degenerate:
        try:
            lu_piv = lu_factor(jac.matrix)
            with np.errstate(all="ignore"):
                X = lu_solve(lu_piv, jac.rhs)
                resid = np.abs(jac.matrix @ X - jac.rhs).max()
                if not np.isfinite(resid) or resid > 1e-7 or np.abs(X).max() > 1e10:
                    degenerate = True
                else:
                    # A dtheta row is unique across the solution set only if
                    # its unit vector lies in range(A^T); probe each row with
                    # a transpose solve against the existing factorization.
                    for r in rows:
                        er = np.zeros(10 * T)
                        er[3 * T + r] = 1.0
                        w = lu_solve(lu_piv, er, trans=1)
                        # row error is roughly |w| times the solution noise
                        # in the assembled entries, so a huge probe vector
                        # means an untrustworthy row even when consistent
                        if not np.all(np.isfinite(w)) or np.abs(w).max() > 1e5 or (
                            np.abs(jac.matrix.T @ w - er).max() > 1e-8
                        ):
                            degenerate = True
                            break
        except (np.linalg.LinAlgError, ValueError):
            degenerate = True
    if degenerate:
        X = _min_norm_solve(jac.matrix, jac.rhs)
    dtheta = X[3 * T : 4 * T, :]
    return DualSensitivity(matrix=dtheta, degenerate=degenerate)


def _min_norm_solve(A: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    try:
        return np.linalg.lstsq(A, rhs, rcond=None)[0]
    except np.linalg.LinAlgError:
        pass
    try:
        from scipy.linalg import lstsq as scipy_lstsq

        return scipy_lstsq(A, rhs, lapack_driver="gelss")[0]
    except Exception:
        # hopeless conditioning; callers treat the flagged zeros as skipped
        return np.zeros((A.shape[0], rhs.shape[1]))


def dual_price_sensitivity(
    sol: ArbSolution, params: StorageParams, prices
) -> DualSensitivity:
    """Solve the linearized system and extract the dtheta block (T x T).

    Entry (i, j) is the derivative of theta_i with respect to price_j. A
    singular or untrustworthy solve falls back to the minimum-norm least
    squares solution and is flagged degenerate; callers decide whether to
    skip such samples.
    """
    return _solve_sensitivity(sol, params, prices, rows=range(sol.horizon))


def _assemble_batch(sols, params: StorageParams, Tt: int) -> np.ndarray:
    """Stacked linearized systems, one per solved level. The stationarity and
    transition blocks are shared; only the complementarity diagonals differ."""
    base = assemble_kkt_jacobian(sols[0], params, np.zeros(Tt)).matrix
    B = len(sols)
    A = np.broadcast_to(base, (B, 10 * Tt, 10 * Tt)).copy()
    R = params.power_rating
    E = params.capacity
    idx = np.arange(Tt)
    rows_cols = [
        (4, 0, lambda s: -s.u_hi), (4, 4, lambda s: R - s.p),
        (5, 0, lambda s: s.u_lo), (5, 5, lambda s: s.p),
        (6, 1, lambda s: -s.v_hi), (6, 6, lambda s: R - s.b),
        (7, 1, lambda s: s.v_lo), (7, 7, lambda s: s.b),
        (8, 2, lambda s: -s.w_hi), (8, 8, lambda s: E - s.e),
        (9, 2, lambda s: s.w_lo), (9, 9, lambda s: s.e),
    ]
    for bi, bj, get in rows_cols:
        vals = np.stack([get(s) for s in sols])
        A[:, bi * Tt + idx, bj * Tt + idx] = vals
    return A


def theta_with_jacobian(
    prices, params: StorageParams, soc_levels
) -> tuple[np.ndarray, ThetaJacobian]:
    """Opportunity duals at each SoC level together with their price
    gradients, batching the level solves and the linearized systems."""
    prices = np.asarray(prices, dtype=float)
    soc_levels = np.asarray(soc_levels, dtype=float)
    T = prices.size
    N = soc_levels.size
    theta = np.zeros(N)
    out = np.zeros((N, T))
    flags = np.zeros(N, dtype=bool)
    if T <= 1:
        return theta, ThetaJacobian(matrix=out, degenerate=flags)
    tail = prices[1:]
    Tt = tail.size
    sols = solve_arbitrage_batch(tail, params, soc_levels)
    for j, sol in enumerate(sols):
        theta[j] = sol.theta[0]
        flags[j] = _breakpoint_pair(sol, params, tail)

    # The needed Jacobian row is e_r' A^{-1} rhs with r the first dtheta
    # coordinate. One transpose solve w = A^{-T} e_r yields both the row
    # (w' rhs, and the rhs has only the two leading +/-identity blocks, so
    # the row is w[T:2T] - w[:T]) and the uniqueness probe |A'w - e_r|.
    er = np.zeros(10 * Tt)
    er[3 * Tt] = 1.0
    A = _assemble_batch(sols, params, Tt)
    for j in range(N):
        if flags[j]:
            continue
        try:
            lu = lu_factor(A[j])
            with np.errstate(all="ignore"):
                w = lu_solve(lu, er, trans=1)
        except (np.linalg.LinAlgError, ValueError):
            flags[j] = True
            continue
        if (
            not np.all(np.isfinite(w))
            or np.abs(w).max() > 1e5
            or np.abs(A[j].T @ w - er).max() > 1e-8
        ):
            flags[j] = True
            continue
        out[j, 1:] = w[Tt : 2 * Tt] - w[:Tt]
    if flags.any():
        log.debug("theta_jacobian: %d degenerate levels", int(flags.sum()))
    return theta, ThetaJacobian(matrix=out, degenerate=flags)


def theta_jacobian(prices, params: StorageParams, soc_levels) -> ThetaJacobian:
    """Gradient of each SoC level's opportunity dual with respect to the bid
    window prices, stacked into an N x T matrix.

    The leading window entry is the interval being bid; the opportunity
    program runs on the remaining entries, so the first column is zero. Each
    level solves the tail program at that starting SoC and keeps the first
    row of its dual sensitivity. Degenerate levels give a flagged zero row.
    """
    return theta_with_jacobian(prices, params, soc_levels)[1]


def dump_kkt_csv(jac: KktJacobian, X: np.ndarray, directory) -> None:
    """Debug dump of the assembled matrix and its solution as CSV."""
    from pathlib import Path

    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    np.savetxt(d / "kkt_matrix.csv", jac.matrix, delimiter=",")
    np.savetxt(d / "kkt_solution.csv", X, delimiter=",")
