"""Batched primal-dual interior-point solver for box-constrained QPs.

Solves   min_z  1/2 z'Qz + c'z   s.t.  A z = b,  lb <= z <= ub
with a Mehrotra predictor-corrector iteration. The equality multipliers y
follow the Lagrangian convention

    L = 1/2 z'Qz + c'z + y'(Az - b) - mu_lo'(z - lb) + mu_hi'(z - ub)

so stationarity reads  Qz + c + A'y - mu_lo + mu_hi = 0  and all inequality
multipliers are nonnegative. Path-following drives iterates to the analytic
center of the optimal face, which pins down the duals returned for degenerate
vertices.

Problems are batched over a leading axis: c and b may be (B, n) and (B, m)
while A, lb, ub are shared. Q may be None (LP), (n, n), or (B, n, n).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = ["QpResult", "SolverError", "solve_box_qp"]


class SolverError(RuntimeError):
    """The interior-point iteration failed to converge within the cap."""


@dataclass(frozen=True)
class QpResult:
    z: np.ndarray
    y: np.ndarray
    mu_lo: np.ndarray
    mu_hi: np.ndarray
    objective: np.ndarray
    iterations: int
    converged: np.ndarray


def _alpha_max(step: np.ndarray, room: np.ndarray) -> np.ndarray:
    """Largest alpha in (0, 1] with room + alpha*step >= 0, per batch row."""
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(step < 0.0, -room / step, np.inf)
    return np.minimum(ratio.min(axis=-1), 1.0)


def solve_box_qp(
    c,
    A,
    b,
    lb,
    ub,
    Q=None,
    *,
    tol_feas: float = 1e-10,
    tol_gap: float = 1e-8,
    max_iter: int = 500,
) -> QpResult:
    c = np.atleast_2d(np.asarray(c, dtype=float))
    squeeze = np.asarray(b).ndim == 1
    b = np.atleast_2d(np.asarray(b, dtype=float))
    A = np.asarray(A, dtype=float)
    lb = np.asarray(lb, dtype=float)
    ub = np.asarray(ub, dtype=float)
    m, n = A.shape
    B = max(c.shape[0], b.shape[0])
    c = np.broadcast_to(c, (B, n)).copy()
    b = np.broadcast_to(b, (B, m)).copy()

    if Q is None:
        Qd = np.zeros((1, n, n))
    else:
        Q = np.asarray(Q, dtype=float)
        Qd = Q[None, :, :] if Q.ndim == 2 else Q
    Qd = np.broadcast_to(Qd, (B, n, n))

    box = ub - lb
    interior_pad = 1e-13 * box
    z = np.broadcast_to((lb + ub) / 2.0, (B, n)).copy()
    y = np.zeros((B, m))
    mu_scale = 1.0 + 0.1 * np.abs(c).max(axis=1, keepdims=True)
    mu_lo = np.broadcast_to(mu_scale, (B, n)).copy()
    mu_hi = mu_lo.copy()

    c_scale = 1.0 + np.abs(c).max(axis=1)
    b_scale = 1.0 + np.abs(b).max(axis=1)
    eye_n = np.eye(n)
    eye_m = np.eye(m)
    rho = 1e-12
    converged = np.zeros(B, dtype=bool)
    it = 0

    for it in range(1, max_iter + 1):
        s_lo = z - lb
        s_hi = ub - z
        Qz = np.einsum("bij,bj->bi", Qd, z)
        r_d = Qz + c + y @ A - mu_lo + mu_hi
        r_p = z @ A.T - b
        gap = (np.sum(s_lo * mu_lo, axis=1) + np.sum(s_hi * mu_hi, axis=1)) / (2 * n)
        # worst pairwise product, so complementarity holds per constraint and
        # not just on average
        gap_max = np.maximum(
            (s_lo * mu_lo).max(axis=1), (s_hi * mu_hi).max(axis=1)
        )

        converged = (
            (np.abs(r_d).max(axis=1) <= tol_feas * c_scale)
            & (np.abs(r_p).max(axis=1) <= tol_feas * b_scale)
            & (gap_max <= tol_gap)
        )
        if converged.all():
            break

        d_lo = mu_lo / s_lo
        d_hi = mu_hi / s_hi
        M = np.empty((B, n + m, n + m))
        M[:, :n, :n] = Qd + rho * eye_n
        M[:, np.arange(n), np.arange(n)] += d_lo + d_hi
        M[:, :n, n:] = A.T
        M[:, n:, :n] = A
        M[:, n:, n:] = -rho * eye_m

        def newton(rc_lo, rc_hi):
            rhs = np.empty((B, n + m))
            rhs[:, :n] = -r_d + rc_lo / s_lo - rc_hi / s_hi
            rhs[:, n:] = -r_p
            try:
                sol = np.linalg.solve(M, rhs[..., None])[..., 0]
            except np.linalg.LinAlgError:
                sol = np.linalg.solve(
                    M + 1e-8 * np.eye(n + m), rhs[..., None]
                )[..., 0]
            dz = sol[:, :n]
            dy = sol[:, n:]
            dmu_lo = (rc_lo - mu_lo * dz) / s_lo
            dmu_hi = (rc_hi + mu_hi * dz) / s_hi
            return dz, dy, dmu_lo, dmu_hi

        # affine scaling (predictor) step
        dz_a, dy_a, dmu_lo_a, dmu_hi_a = newton(-s_lo * mu_lo, -s_hi * mu_hi)
        a_p = np.minimum(_alpha_max(dz_a, s_lo), _alpha_max(-dz_a, s_hi))
        a_d = np.minimum(_alpha_max(dmu_lo_a, mu_lo), _alpha_max(dmu_hi_a, mu_hi))
        gap_aff = (
            np.sum((s_lo + a_p[:, None] * dz_a) * (mu_lo + a_d[:, None] * dmu_lo_a), axis=1)
            + np.sum((s_hi - a_p[:, None] * dz_a) * (mu_hi + a_d[:, None] * dmu_hi_a), axis=1)
        ) / (2 * n)
        sigma = np.clip(gap_aff / np.maximum(gap, 1e-300), 0.0, 1.0) ** 3

        # corrector step
        target = (sigma * gap)[:, None]
        rc_lo = -s_lo * mu_lo - dz_a * dmu_lo_a + target
        rc_hi = -s_hi * mu_hi + dz_a * dmu_hi_a + target
        dz, dy, dmu_lo, dmu_hi = newton(rc_lo, rc_hi)

        tau = np.minimum(0.9999, np.maximum(0.995, 1.0 - gap))
        a_p = tau * np.minimum(_alpha_max(dz, s_lo), _alpha_max(-dz, s_hi))
        a_d = tau * np.minimum(_alpha_max(dmu_lo, mu_lo), _alpha_max(dmu_hi, mu_hi))
        a_p = np.where(converged, 0.0, np.minimum(a_p, 1.0))
        a_d = np.where(converged, 0.0, np.minimum(a_d, 1.0))

        z = np.clip(z + a_p[:, None] * dz, lb + interior_pad, ub - interior_pad)
        y = y + a_d[:, None] * dy
        mu_lo = np.maximum(mu_lo + a_d[:, None] * dmu_lo, 0.0)
        mu_hi = np.maximum(mu_hi + a_d[:, None] * dmu_hi, 0.0)

        if not np.all(np.isfinite(z)) or not np.all(np.isfinite(mu_lo)):
            raise SolverError("interior-point iterates diverged")

    objective = 0.5 * np.einsum("bi,bij,bj->b", z, Qd, z) + np.sum(c * z, axis=1)
    if squeeze and B == 1:
        return QpResult(
            z[0], y[0], mu_lo[0], mu_hi[0], objective[0], it, converged[0:1].copy()
        )
    return QpResult(z, y, mu_lo, mu_hi, objective, it, converged)
