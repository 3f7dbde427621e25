"""Small LP and box-QP helpers with independent optimality checks.

The LP path wraps scipy's HiGHS backend but never trusts its status
blindly: every reported optimum is re-checked against the KKT system
and rejected if residuals exceed tolerance.  The box QP used for input
saturation is separable, so it is solved exactly by projection.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linprog

#: relative tolerance for the independent KKT recheck (HiGHS itself works
#: to ~1e-7 feasibility on large problems)
KKT_TOL = 1e-7


class OptimizationError(RuntimeError):
    pass


@dataclass(frozen=True)
class LpSolution:
    x: np.ndarray
    objective: float
    status: str
    kkt_residual: float
    duals_ineq: np.ndarray = field(default=None)
    duals_eq: np.ndarray = field(default=None)


def solve_lp(c, A_ub=None, b_ub=None, A_eq=None, b_eq=None, bounds=None,
             kkt_tol=None):
    """Minimize c @ x subject to A_ub x <= b_ub, A_eq x = b_eq, bounds.

    bounds follows scipy's convention (pairs, None for free).  Returns
    an LpSolution with status "optimal" or "infeasible"; an optimum
    failing the independent KKT check raises OptimizationError.
    """
    c = np.asarray(c, dtype=float)
    if bounds is None:
        bounds = [(None, None)] * c.size
    res = linprog(c, A_ub=A_ub, b_ub=b_ub, A_eq=A_eq, b_eq=b_eq,
                  bounds=bounds, method="highs")
    if res.status == 2:
        return LpSolution(x=None, objective=np.nan, status="infeasible",
                          kkt_residual=np.nan)
    if not res.success:
        raise OptimizationError(f"LP solve failed: {res.message}")

    x = res.x
    lam_ub = -res.ineqlin.marginals if A_ub is not None else np.zeros(0)
    nu_eq = res.eqlin.marginals if A_eq is not None else np.zeros(0)
    lam_lo = res.lower.marginals
    lam_hi = res.upper.marginals

    # each KKT block is normalized by the scale of the data entering it
    lam_scale = 1.0 + max(float(np.max(np.abs(lam_ub), initial=0.0)),
                          float(np.max(np.abs(nu_eq), initial=0.0)),
                          float(np.max(np.abs(lam_lo), initial=0.0)),
                          float(np.max(np.abs(lam_hi), initial=0.0)))
    resid = 0.0
    # primal feasibility
    if A_ub is not None:
        b = np.asarray(b_ub, dtype=float)
        slack = np.asarray(A_ub) @ x - b
        b_scale = 1.0 + float(np.max(np.abs(b), initial=0.0))
        resid = max(resid, float(np.max(slack, initial=0.0)) / b_scale)
        # complementarity and dual sign
        resid = max(resid, float(np.max(np.abs(lam_ub * slack), initial=0.0))
                    / (lam_scale * b_scale))
        resid = max(resid, float(np.max(-lam_ub, initial=0.0)) / lam_scale)
    if A_eq is not None:
        b = np.asarray(b_eq, dtype=float)
        b_scale = 1.0 + float(np.max(np.abs(b), initial=0.0))
        resid = max(resid, float(np.max(np.abs(np.asarray(A_eq) @ x - b),
                                        initial=0.0)) / b_scale)
    # stationarity: c + A_ub^T lam + A_eq^T nu - bound duals = 0
    grad = c.copy()
    if A_ub is not None:
        grad += np.asarray(A_ub).T @ lam_ub
    if A_eq is not None:
        grad += np.asarray(A_eq).T @ nu_eq
    grad -= lam_lo + lam_hi  # scipy: lower marginals >= 0, upper <= 0
    c_scale = 1.0 + float(np.max(np.abs(c)))
    resid = max(resid, float(np.max(np.abs(grad))) / max(c_scale, lam_scale))
    resid = max(resid, float(np.max(-lam_lo, initial=0.0)) / lam_scale)
    resid = max(resid, float(np.max(lam_hi, initial=0.0)) / lam_scale)

    tol = KKT_TOL if kkt_tol is None else kkt_tol
    if resid > tol:
        raise OptimizationError(
            f"LP KKT residual {resid:.2e} exceeds {tol:.2e}")
    return LpSolution(x=x, objective=float(res.fun), status="optimal",
                      kkt_residual=float(resid), duals_ineq=lam_ub,
                      duals_eq=nu_eq)


@dataclass(frozen=True)
class QpSolution:
    x: np.ndarray
    status: str


def solve_box_qp(target, lower, upper):
    """Minimize ||u - target||^2 subject to lower <= u <= upper.

    Separable, so the exact solution is coordinatewise clipping.  An
    empty box (lower > upper in any coordinate) reports infeasible.
    """
    target = np.atleast_1d(np.asarray(target, dtype=float))
    lower = np.broadcast_to(np.asarray(lower, dtype=float), target.shape)
    upper = np.broadcast_to(np.asarray(upper, dtype=float), target.shape)
    if np.any(lower > upper):
        return QpSolution(x=None, status="infeasible")
    return QpSolution(x=np.clip(target, lower, upper), status="optimal")
