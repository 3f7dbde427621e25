"""Certified polynomial data for the reduced walking dynamics.

Samples the exact reduced dynamics over a grid, fits polynomial
surrogates (dynamics, error bounds, input box), and builds
semi-algebraic outer approximations of the unsafe set, guard, and reset
relation.  Every approximation carries a direction: dynamics-error and
unsafe-set are outer (conservative), the realizable-input box is inner.
A random-sampling validation gate re-checks all directions and the
pipeline refuses to continue when it fails.

Evaluation of the exact reduced dynamics is vectorized over batches of
states; the batched path is tested for exact agreement with the
per-point path in the dynamics and manifold modules.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from . import dynamics as dyn
from . import manifold as mf
from .gait import ALPHA_PATTERN, OUTPUT_ROWS, THETA_GRAD
from .lpqp import solve_lp
from .model import RobotModel
from .polynomial import Polynomial, basis_exponents, fit_least_squares

VARS = ("theta", "theta_dot", "alpha", "alpha_dot")
#: Doubled variable set for reset relations: pre-state then post-state.
VARS_PAIR = VARS + tuple(v + "_post" for v in VARS)

DEFAULT_MARGIN_FACTOR = 1.1
DEFAULT_MARGIN_ABS = 1e-6


class ApproxError(RuntimeError):
    pass


def default_box(man: mf.Manifold, theta_dot=(-0.3, 1.6), alpha_dot=(-1.5, 1.5)):
    return {
        "theta": (man.theta_min, man.theta_max),
        "theta_dot": tuple(theta_dot),
        "alpha": tuple(man.alpha_range),
        "alpha_dot": tuple(alpha_dot),
    }


@dataclass(frozen=True)
class SampleGrid:
    box: dict
    counts: tuple = (30, 30, 30, 30)

    def __post_init__(self):
        if any(c < 2 for c in self.counts):
            raise ValueError("need at least 2 samples per dimension")

    def points(self) -> np.ndarray:
        axes = [np.linspace(*self.box[v], c) for v, c in zip(VARS, self.counts)]
        mesh = np.meshgrid(*axes, indexing="ij")
        return np.column_stack([m.ravel() for m in mesh])


# -- batched exact evaluation -------------------------------------------


def _batch_kinematics(model: RobotModel, Q):
    """Per-batch COM jacobians and their velocity derivative factors."""
    phi = Q @ dyn.A_MAP.T  # (m, 5)
    u = np.stack([-np.sin(phi), np.cos(phi)], axis=1)   # (m, 2, 5)
    du = np.stack([-np.cos(phi), -np.sin(phi)], axis=1)
    J = np.einsum("ik,pck,kj->picj", model.com_map, du, dyn.A_MAP)
    return u, du, J


def _batch_mass_bias(model: RobotModel, Q, Qd):
    u, du, J = _batch_kinematics(model, Q)
    M = np.einsum("i,picj,pick->pjk", model.link_masses, J, J)
    M += (dyn.A_MAP.T @ (model.link_inertias[:, None] * dyn.A_MAP))[None]
    # Jdot contracted with qdot: dJ is symmetric in its two derivative
    # indices, so C(q, qd) qd = sum_i m_i J_i^T (Jdot_i qd) exactly
    # (constant link inertias add no velocity terms)
    Aqd = Qd @ dyn.A_MAP.T
    Jdot = np.einsum("ik,pck,kj,pk->picj", model.com_map, -u, dyn.A_MAP, Aqd)
    acc = np.einsum("picj,pj->pic", Jdot, Qd)
    bias = np.einsum("i,picj,pic->pj", model.link_masses, J, acc)
    bias += model.gravity * np.einsum("i,pij->pj", model.link_masses, J[:, :, 1, :])
    return M, bias


def _batch_lift(man: mf.Manifold, X):
    """Vectorized lift; returns (Q, Qd, ok) with ok flagging finite rows."""
    theta, theta_dot, alpha, alpha_dot = X.T
    s = alpha / man.alpha_fit
    from numpy.polynomial import chebyshev as C
    c1 = C.chebval(s, man.c1_coef).T       # (m, 4)
    c1d = C.chebval(s, man._c1_d).T
    c1dd = C.chebval(s, man._c1_dd).T
    a, b = man.theta_min, man.theta_max
    pm = [mf._hermite(theta, a, b, k) for k in range(3)]
    qd_rows = [np.asarray(man.gait.q_of_theta(theta, k), dtype=float)
               for k in range(3)]
    w = -qd_rows[0] + c1 * pm[0][:, None]
    w_t = -qd_rows[1] + c1 * pm[1][:, None]
    w_tt = -qd_rows[2] + c1 * pm[2][:, None]
    w_a = c1d * pm[0][:, None]
    w_ta = c1d * pm[1][:, None]
    w_aa = c1dd * pm[0][:, None]

    A = np.vstack([mf.S_SELECT, THETA_GRAD])
    rhs = np.concatenate(
        [-ALPHA_PATTERN[None] * alpha[:, None] - w, theta[:, None]], axis=1)
    Q = rhs @ np.linalg.inv(A).T

    Hq = mf.S_SELECT[None] + w_t[:, :, None] * THETA_GRAD[None, None, :]
    Ha = ALPHA_PATTERN[None] + w_a
    Av = np.concatenate([Hq, np.broadcast_to(THETA_GRAD, (X.shape[0], 1, 5))], axis=1)
    rhs_v = np.concatenate([-Ha * alpha_dot[:, None], theta_dot[:, None]], axis=1)
    ok = np.isfinite(Av).all(axis=(1, 2))
    Qd = np.full_like(Q, np.nan)
    try:
        Qd_all = np.linalg.solve(Av, rhs_v[:, :, None])[:, :, 0]
        Qd = Qd_all
        ok &= np.isfinite(Qd).all(axis=1)
    except np.linalg.LinAlgError:
        # fall back row by row when some slice is singular
        for p in range(X.shape[0]):
            try:
                Qd[p] = np.linalg.solve(Av[p], rhs_v[p])
            except np.linalg.LinAlgError:
                ok[p] = False
    derivs = (w_tt, w_ta, w_aa, Hq, Ha)
    return Q, Qd, ok, derivs


def evaluate_reduced(man: mf.Manifold, X, chunk: int = 20000):
    """Exact reduced dynamics and realizable-input intervals, batched.

    Returns a dict of arrays over the rows of X: a0, a1 (theta_ddot
    affine pieces), u_lo, u_hi (shaping-input interval keeping torques
    in the box), lift_ok, config_ok.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    m = X.shape[0]
    out = {
        "a0": np.full(m, np.nan), "a1": np.full(m, np.nan),
        "u_lo": np.full(m, -np.inf), "u_hi": np.full(m, np.inf),
        "lift_ok": np.zeros(m, dtype=bool), "config_ok": np.zeros(m, dtype=bool),
    }
    for lo in range(0, m, chunk):
        sl = slice(lo, min(lo + chunk, m))
        _eval_chunk(man, X[sl], out, sl)
    return out


def _eval_chunk(man, X, out, sl):
    model = man.model
    theta_dot, alpha_dot = X[:, 1], X[:, 3]
    Q, Qd, ok, (w_tt, w_ta, w_aa, Hq, Ha) = _batch_lift(man, X)
    M, bias = _batch_mass_bias(model, Q, Qd)

    MinvB = np.linalg.solve(M, np.broadcast_to(dyn.B_INPUT, (X.shape[0], 5, 4)))
    Minv_bias = np.linalg.solve(M, bias[:, :, None])[:, :, 0]
    decouple = Hq @ MinvB                                   # (m, 4, 4)
    r_qd = Qd @ THETA_GRAD                                  # = theta_dot
    drift = (w_tt * (r_qd**2)[:, None]
             + 2.0 * alpha_dot[:, None] * w_ta * r_qd[:, None]
             + w_aa * alpha_dot[:, None]**2
             - np.einsum("pij,pj->pi", Hq, Minv_bias))
    # on-manifold: h = 0 and h_dot = 0, so the stabilizer adds nothing
    cond_ok = ok.copy()
    u0 = np.full((X.shape[0], 4), np.nan)
    u1 = np.full((X.shape[0], 4), np.nan)
    try:
        sols = np.linalg.solve(
            decouple, np.stack([-drift, -np.broadcast_to(Ha, drift.shape)], axis=2))
        u0, u1 = sols[:, :, 0], sols[:, :, 1]
        cond_ok &= np.isfinite(u0).all(axis=1) & np.isfinite(u1).all(axis=1)
    except np.linalg.LinAlgError:
        for p in range(X.shape[0]):
            try:
                s = np.linalg.solve(decouple[p], np.column_stack([-drift[p], -Ha[p]]))
                u0[p], u1[p] = s[:, 0], s[:, 1]
            except np.linalg.LinAlgError:
                cond_ok[p] = False

    r_Minv = np.linalg.solve(M, np.broadcast_to(THETA_GRAD, (X.shape[0], 5))[:, :, None])[:, :, 0]
    Bu0 = u0 @ dyn.B_INPUT.T
    Bu1 = u1 @ dyn.B_INPUT.T
    a0 = np.einsum("pj,pj->p", r_Minv, Bu0 - bias)
    a1 = np.einsum("pj,pj->p", r_Minv, Bu1)

    u_lo, u_hi = _input_interval(u0, u1, model.u_max)

    out["a0"][sl] = np.where(cond_ok, a0, np.nan)
    out["a1"][sl] = np.where(cond_ok, a1, np.nan)
    out["u_lo"][sl] = u_lo
    out["u_hi"][sl] = u_hi
    out["lift_ok"][sl] = cond_ok
    out["config_ok"][sl] = _batch_feasible(model, Q) & ok


def _input_interval(u0, u1, u_max, zero_tol=1e-12):
    """Per-row interval of shaping inputs keeping all torques in the box.

    Each torque row is affine in the input, so the interval is the
    intersection of per-row slabs; rows with (numerically) zero gain
    either constrain nothing or empty the interval.
    """
    lo = np.full(u0.shape[0], -np.inf)
    hi = np.full(u0.shape[0], np.inf)
    for i in range(u0.shape[1]):
        g = u1[:, i]
        c = u0[:, i]
        with np.errstate(divide="ignore", invalid="ignore"):
            e1 = (-u_max - c) / g
            e2 = (u_max - c) / g
        row_lo = np.minimum(e1, e2)
        row_hi = np.maximum(e1, e2)
        degenerate = np.abs(g) < zero_tol
        infeasible = degenerate & (np.abs(c) > u_max)
        row_lo = np.where(degenerate, -np.inf, row_lo)
        row_hi = np.where(degenerate, np.inf, row_hi)
        row_lo = np.where(infeasible, np.inf, row_lo)
        row_hi = np.where(infeasible, -np.inf, row_hi)
        lo = np.maximum(lo, row_lo)
        hi = np.minimum(hi, row_hi)
    bad = ~np.isfinite(u0).all(axis=1)
    lo[bad], hi[bad] = np.inf, -np.inf
    return lo, hi


def _batch_feasible(model: RobotModel, Q):
    limits = np.asarray(model.joint_limits, dtype=float)
    limits_lo, limits_hi = limits[:, 0], limits[:, 1]
    ok = np.all((Q >= limits_lo) & (Q <= limits_hi), axis=1)
    phi = Q @ dyn.A_MAP.T
    u_y = np.cos(phi)                                       # (m, 5)
    l_t, l_th, l_sh = (model.lengths[n] for n in ("torso", "thigh", "shin"))
    knee_y = l_sh * u_y[:, 2]
    hip_y = knee_y + l_th * u_y[:, 1]
    torso_y = hip_y + l_t * u_y[:, 0]
    swing_knee_y = hip_y - l_th * u_y[:, 3]
    swing_foot_y = swing_knee_y - l_sh * u_y[:, 4]
    m_clear = model.clearance_margin - dyn.GROUND_TOL
    ok &= (knee_y > m_clear) & (hip_y > m_clear)
    ok &= (torso_y > m_clear) & (swing_knee_y > m_clear)
    ok &= swing_foot_y >= -dyn.GROUND_TOL
    return ok


# -- sample table -------------------------------------------------------


@dataclass
class SampleTable:
    points: np.ndarray          # (m, 4)
    f: np.ndarray               # (m, 4) drift rows
    g: np.ndarray               # (m, 4) input rows
    u_lo: np.ndarray
    u_hi: np.ndarray
    lift_ok: np.ndarray
    config_ok: np.ndarray

    @property
    def torque_ok(self) -> np.ndarray:
        return self.u_lo <= self.u_hi

    @property
    def usable(self) -> np.ndarray:
        """Rows where the exact dynamics are defined."""
        return self.lift_ok

    @property
    def safe_labeled(self) -> np.ndarray:
        return self.lift_ok & self.config_ok & self.torque_ok

    @staticmethod
    def concat(tables):
        tables = list(tables)
        return SampleTable(*(np.concatenate([getattr(t, name) for t in tables])
                             for name in ("points", "f", "g", "u_lo", "u_hi",
                                          "lift_ok", "config_ok")))


def sample_dynamics(man: mf.Manifold, grid: SampleGrid, chunk: int = 20000) -> SampleTable:
    X = grid.points()
    res = evaluate_reduced(man, X, chunk=chunk)
    f = np.column_stack([X[:, 1], res["a0"], X[:, 3], np.zeros(X.shape[0])])
    g = np.column_stack([np.zeros(X.shape[0]), res["a1"],
                         np.zeros(X.shape[0]), np.ones(X.shape[0])])
    return SampleTable(points=X, f=f, g=g, u_lo=res["u_lo"], u_hi=res["u_hi"],
                       lift_ok=res["lift_ok"], config_ok=res["config_ok"])


# -- semi-algebraic sets -------------------------------------------------


@dataclass(frozen=True)
class SemiAlgebraicSet:
    """Membership: all listed polynomials nonnegative."""

    polys: tuple
    name: str = ""

    def __post_init__(self):
        if not self.polys:
            raise ValueError("semi-algebraic set needs at least one polynomial")

    def contains(self, points, tol: float = 0.0) -> np.ndarray:
        points = np.atleast_2d(points)
        member = np.ones(points.shape[0], dtype=bool)
        for p in self.polys:
            cols = [points[:, VARS_PAIR.index(v)] if points.shape[1] == 8
                    else points[:, VARS.index(v)] for v in p.vars]
            member &= p(*cols) >= -tol
        return member


@dataclass(frozen=True)
class UnsafeSet:
    """Union of semi-algebraic pieces."""

    pieces: tuple

    def contains(self, points, tol: float = 0.0) -> np.ndarray:
        points = np.atleast_2d(points)
        member = np.zeros(points.shape[0], dtype=bool)
        for piece in self.pieces:
            member |= piece.contains(points, tol=tol)
        return member


@dataclass(frozen=True)
class InputBounds:
    u_min: Polynomial
    u_max: Polynomial
    margin_lo: float
    margin_hi: float

    def interval(self, points):
        points = np.atleast_2d(points)
        return self.u_min.eval_matrix(points), self.u_max.eval_matrix(points)


# -- fitting -------------------------------------------------------------


def _unit_points(points, box):
    center = np.array([0.5 * (box[v][0] + box[v][1]) for v in VARS])
    half = np.array([0.5 * (box[v][1] - box[v][0]) for v in VARS])
    return (points - center) / half


def _fit_scaled(points, values, box, degree):
    """Fit in unit-box coordinates, return polynomial in original ones."""
    unit = _unit_points(points, box)
    poly_unit, rms, worst = fit_least_squares(unit, values, VARS, degree)
    return poly_unit.unscale(box), rms, worst


def fit_dynamics(table: SampleTable, box: dict, degree: int = 3):
    """Least-squares polynomial surrogates (f_p, g_p) of the reduced
    dynamics.  Only the pivot-acceleration row needs fitting; the other
    rows are already polynomial and are emitted exactly."""
    th_dot = Polynomial.variable(VARS, "theta_dot")
    al_dot = Polynomial.variable(VARS, "alpha_dot")
    zero = Polynomial.zero(VARS)
    one = Polynomial.constant(VARS, 1.0)
    mask = table.usable
    pts = table.points[mask]
    f1, f1_rms, f1_max = _fit_scaled(pts, table.f[mask, 1], box, degree)
    g1, g1_rms, g1_max = _fit_scaled(pts, table.g[mask, 1], box, max(degree - 1, 1))
    f_p = [th_dot, f1, al_dot, zero]
    g_p = [zero, g1, zero, one]
    stats = {"f1_rms": f1_rms, "f1_max": f1_max,
             "g1_rms": g1_rms, "g1_max": g1_max, "rows_used": int(mask.sum())}
    return f_p, g_p, stats


def _design_matrix(points, box, expos):
    unit = _unit_points(points, box)
    out = np.ones((unit.shape[0], len(expos)))
    for j, expo in enumerate(expos):
        for k, e in enumerate(expo):
            if e:
                out[:, j] *= unit[:, k] ** e
    return out


def structural_unsafe_pieces(box: dict, face_margin: float = 0.05) -> tuple:
    """Unsafe pieces that do not depend on fitted quantities: backward
    motion, shaping-boundary leave sets, and velocity-box face slabs."""
    th_dot = Polynomial.variable(VARS, "theta_dot")
    al = Polynomial.variable(VARS, "alpha")
    al_dot = Polynomial.variable(VARS, "alpha_dot")
    al_lo, al_hi = box["alpha"]
    td_lo, td_hi = box["theta_dot"]
    ad_lo, ad_hi = box["alpha_dot"]
    td_span = td_hi - td_lo
    ad_span = ad_hi - ad_lo
    return (
        SemiAlgebraicSet((-th_dot,), name="backward-motion"),
        SemiAlgebraicSet((al - al_hi, al_dot), name="alpha-upper-leave"),
        SemiAlgebraicSet((al_lo - al, -al_dot), name="alpha-lower-leave"),
        SemiAlgebraicSet((th_dot - (td_hi - face_margin * td_span),),
                         name="theta-dot-face"),
        SemiAlgebraicSet((al_dot - (ad_hi - face_margin * ad_span),),
                         name="alpha-dot-upper-face"),
        SemiAlgebraicSet(((ad_lo + face_margin * ad_span) - al_dot,),
                         name="alpha-dot-lower-face"),
    )


def fit_input_bounds(table: SampleTable, box: dict, degree: int = 4,
                     clip_range: float = 40.0, width_cap: float = 0.0,
                     face_margin: float = 0.05, cushion_abs: float = 0.1,
                     margin_abs: float = DEFAULT_MARGIN_ABS,
                     lp_kkt_tol: float = 1e-5):
    """Inner polynomial box of realizable shaping inputs.

    One linear program places both endpoint polynomials at once:
    maximize the box integral of the width, subject to staying inside
    the true realizable interval at every torque-feasible sample and to
    width <= width_cap at every torque-infeasible sample not already
    inside a structural unsafe piece.  The cap makes the
    narrow-input-box unsafe piece cover the rest of the infeasible
    region.  Target intervals are trimmed to [-clip_range, clip_range]
    by raising the lower endpoint and lowering the upper one; trimming
    shrinks the target, so the polynomial box stays inner while the
    extreme endpoint values near the feasibility boundary disappear.
    """
    feas = table.usable & table.torque_ok
    covered = UnsafeSet(structural_unsafe_pieces(box, face_margin)
                        ).contains(table.points)
    infeas = table.usable & ~table.torque_ok & ~covered
    if not feas.any():
        raise ApproxError("no torque-feasible samples to fit input bounds")
    pts_f = table.points[feas]
    pts_i = table.points[infeas]
    # trimmed targets, pulled further inward by a cushion so validation
    # points between samples still satisfy inner-ness
    lo = np.maximum(table.u_lo[feas], -clip_range) + cushion_abs
    hi = np.minimum(table.u_hi[feas], clip_range) - cushion_abs

    expos = basis_exponents(len(VARS), degree)
    n = len(expos)
    unit_box = {v: (-1.0, 1.0) for v in VARS}
    moments = np.array([Polynomial.monomial(VARS, e).box_integral(unit_box)
                        for e in expos])
    coef_bound = 10.0 * clip_range
    lp_c = np.concatenate([moments, -moments])
    lp_bounds = [(-coef_bound, coef_bound)] * (2 * n)

    # cutting-plane loop: keep an active subset of sample constraints,
    # re-solve, then pull in the worst violators over all samples until
    # none remain (constraint counts stay manageable even for huge grids)
    rng = np.random.default_rng(0)
    act_lo = list(rng.choice(pts_f.shape[0], min(8000, pts_f.shape[0]),
                             replace=False))
    act_hi = list(act_lo)
    act_cap = list(rng.choice(pts_i.shape[0], min(8000, pts_i.shape[0]),
                              replace=False)) if pts_i.shape[0] else []
    for _ in range(40):
        d_lo = _design_matrix(pts_f[act_lo], box, expos)
        d_hi = _design_matrix(pts_f[act_hi], box, expos)
        d_cap = _design_matrix(pts_i[act_cap], box, expos)
        A_ub = np.vstack([
            np.hstack([-d_lo, np.zeros_like(d_lo)]),   # u_min >= true lo
            np.hstack([np.zeros_like(d_hi), d_hi]),    # u_max <= true hi
            np.hstack([-d_cap, d_cap])])               # width cap
        b_ub = np.concatenate([-lo[act_lo], hi[act_hi],
                               np.full(len(act_cap), width_cap)])
        sol = solve_lp(lp_c, A_ub=A_ub, b_ub=b_ub, bounds=lp_bounds,
                       kkt_tol=lp_kkt_tol)
        if sol.status != "optimal":
            raise ApproxError(f"input-bound LP returned {sol.status}")
        p_min = Polynomial(VARS, dict(zip(expos, sol.x[:n]))).unscale(box)
        p_max = Polynomial(VARS, dict(zip(expos, sol.x[n:]))).unscale(box)
        vmin_f = p_min.eval_matrix(pts_f)
        vmax_f = p_max.eval_matrix(pts_f)
        viol_lo = lo - vmin_f
        viol_hi = vmax_f - hi
        viol_cap = (p_max.eval_matrix(pts_i) - p_min.eval_matrix(pts_i)
                    - width_cap) if pts_i.shape[0] else np.zeros(0)
        tol = 1e-9
        if max(viol_lo.max(initial=0.0), viol_hi.max(initial=0.0),
               viol_cap.max(initial=0.0)) <= tol:
            break
        for viol, active in ((viol_lo, act_lo), (viol_hi, act_hi),
                             (viol_cap, act_cap)):
            bad = np.nonzero(viol > tol)[0]
            if bad.size:
                active.extend(bad[np.argsort(viol[bad])[-4000:]].tolist())
    else:
        raise ApproxError("input-bound cutting-plane loop failed to close")

    u_min = p_min + margin_abs
    u_max = p_max - margin_abs
    width = vmax_f - vmin_f
    stats = {"lp_objective": float(sol.objective),
             "lp_kkt_residual": sol.kkt_residual,
             "feasible_rows": int(feas.sum()),
             "infeasible_rows": int(infeas.sum()),
             "constraints_active": len(act_lo) + len(act_hi) + len(act_cap),
             "nonempty_fraction": float(np.mean(width > 0.0)),
             "median_width": float(np.median(width))}
    return InputBounds(u_min=u_min, u_max=u_max,
                       margin_lo=margin_abs, margin_hi=margin_abs), stats


def fit_error_bounds(table: SampleTable, f_p, g_p, bounds: InputBounds,
                     box: dict, degree: int = 2,
                     margin_factor: float = DEFAULT_MARGIN_FACTOR,
                     cushion_abs: float = 0.02,
                     margin_abs: float = DEFAULT_MARGIN_ABS):
    """Error-bounding polynomials e_p per reduced-dynamics row.

    For each row, e_p(x) must dominate |true - fit| for every input in
    the polynomial box; affinity in the input makes the two endpoints
    sufficient.  Coefficients solve an LP minimizing the exact integral
    of e_p over the box, via a cutting-plane loop over violated samples.
    Rows other than the pivot acceleration are exactly polynomial, so
    their bounds are zero.
    """
    zero = Polynomial.zero(VARS)
    mask = table.usable
    pts = table.points[mask]
    unit = _unit_points(pts, box)
    u_lo_p, u_hi_p = bounds.interval(pts)
    use = u_lo_p <= u_hi_p  # enforce only where the certified box is nonempty

    df = table.f[mask, 1] - f_p[1].eval_matrix(pts)
    dg = table.g[mask, 1] - g_p[1].eval_matrix(pts)
    # required bound at both input endpoints, enforced with headroom so
    # validation points between samples stay under the bound
    need = np.maximum(np.abs(df + dg * u_lo_p), np.abs(df + dg * u_hi_p))
    need = np.where(use, need * margin_factor + cushion_abs, 0.0)

    expos = basis_exponents(4, degree)
    design = np.ones((unit.shape[0], len(expos)))
    for j, expo in enumerate(expos):
        for k, e in enumerate(expo):
            if e:
                design[:, j] *= unit[:, k]**e

    # objective: integral over the unit box of each basis monomial
    unit_box = {v: (-1.0, 1.0) for v in VARS}
    moments = np.array([Polynomial.monomial(VARS, e).box_integral(unit_box)
                        for e in expos])

    # coefficient bounds keep the early (under-constrained) iterations of
    # the cutting-plane loop bounded
    coef_bound = 100.0 * (1.0 + float(need.max()))
    lp_bounds = [(-coef_bound, coef_bound)] * len(expos)
    active = list(np.argsort(need)[-2000:])
    for _ in range(60):
        A_ub = -design[active]
        b_ub = -need[active]
        sol = solve_lp(moments, A_ub=A_ub, b_ub=b_ub, bounds=lp_bounds)
        if sol.status != "optimal":
            raise ApproxError(f"error-bound LP returned {sol.status}")
        vals = design @ sol.x
        violated = np.nonzero(vals < need - 1e-12)[0]
        if violated.size == 0:
            break
        worst = violated[np.argsort(need[violated] - vals[violated])[-2000:]]
        active.extend(worst.tolist())
    else:
        raise ApproxError("error-bound LP cutting-plane loop failed to close")

    e1_unit = Polynomial(VARS, dict(zip(expos, sol.x))) + margin_abs
    e1 = e1_unit.unscale(box)
    info = {"lp_objective": float(sol.objective),
            "lp_kkt_residual": sol.kkt_residual,
            "constraints_active": len(active)}
    return [zero, e1, zero, zero], info


def fit_unsafe_set(table: SampleTable, box: dict, bounds: InputBounds,
                   min_input_width: float = 1.0,
                   face_margin: float = 0.05) -> tuple:
    """Union of semi-algebraic pieces covering everything unsafe.

    Pieces: backward motion, narrow/empty realizable-input box,
    shaping-boundary leave sets, and slabs at the velocity-box faces
    (trajectories may not exit the modeled region while certified).
    Hard-fails if any unsafe-labeled sample escapes the union.
    """
    pieces = structural_unsafe_pieces(box, face_margin) + (
        SemiAlgebraicSet((min_input_width - (bounds.u_max - bounds.u_min),),
                         name="narrow-input-box"),
    )
    unsafe = UnsafeSet(pieces)

    labeled_unsafe = ~table.safe_labeled
    member = unsafe.contains(table.points)
    escaped = labeled_unsafe & ~member
    if escaped.any():
        idx = int(np.nonzero(escaped)[0][0])
        raise ApproxError(
            f"{int(escaped.sum())} unsafe-labeled samples outside the unsafe "
            f"union; first witness x = {table.points[idx]}")
    conservatism = float(np.mean(member & table.safe_labeled)
                         / max(np.mean(table.safe_labeled), 1e-12))
    stats = {"unsafe_labeled_fraction": float(np.mean(labeled_unsafe)),
             "member_fraction": float(np.mean(member)),
             "safe_marked_unsafe_fraction": conservatism}
    return unsafe, stats


def fit_guard_and_reset(man: mf.Manifold, box: dict, n_guard: int = 10000,
                        guard_depth: float = 1e-3,
                        degree: int = 3, seed: int = 20260826,
                        margin_factor: float = DEFAULT_MARGIN_FACTOR,
                        margin_abs: float = DEFAULT_MARGIN_ABS):
    """Outer guard set and outer reset relation over doubled variables.

    theta+ is exactly theta_min (alpha shifts cancel through the leg
    swap) and (alpha, alpha_dot) copy exactly; those rows are two-sided
    equalities with zero inflation.  theta_dot+ is fitted and inflated
    by the observed residual.
    """
    th = Polynomial.variable(VARS_PAIR, "theta")
    th_dot = Polynomial.variable(VARS_PAIR, "theta_dot")
    h_S = SemiAlgebraicSet(
        (th - (man.theta_max - guard_depth), th_dot), name="guard-outer")

    rng = np.random.default_rng(seed)
    pre = np.column_stack([
        np.full(n_guard, man.theta_max),
        rng.uniform(max(box["theta_dot"][0], 1e-3), box["theta_dot"][1], n_guard),
        rng.uniform(*box["alpha"], n_guard),
        rng.uniform(*box["alpha_dot"], n_guard),
    ])
    post = np.array([mf.manifold_reset(man, x) for x in pre])
    if not np.allclose(post[:, 0], man.theta_min, atol=1e-12):
        raise ApproxError("reset theta+ is not constant; update the relation")

    # theta_dot+ depends on (theta_dot-, alpha, alpha_dot); fit over those
    fit_pts = pre.copy()
    fit_pts[:, 0] = man.theta_max  # constant column would break the fit
    unit = _unit_points(fit_pts, {**box, "theta": (man.theta_min, man.theta_max)})
    from .polynomial import fit_least_squares as _fls
    poly_unit, rms, worst = _fls(unit[:, 1:], post[:, 1], VARS[1:], degree)
    rho = poly_unit.unscale({v: box[v] for v in VARS[1:]}).in_vars(VARS_PAIR)
    inflate = worst * margin_factor + margin_abs

    def var(name):
        return Polynomial.variable(VARS_PAIR, name)

    h_R = SemiAlgebraicSet((
        var("theta_post") - man.theta_min, man.theta_min - var("theta_post"),
        var("alpha_post") - var("alpha"), var("alpha") - var("alpha_post"),
        var("alpha_dot_post") - var("alpha_dot"),
        var("alpha_dot") - var("alpha_dot_post"),
        inflate - (var("theta_dot_post") - rho),
        (var("theta_dot_post") - rho) + inflate,
    ), name="reset-relation")

    pairs = np.hstack([pre, post])
    # tolerance absorbs machine-precision residue on the equality rows
    if not h_R.contains(pairs, tol=1e-10).all():
        raise ApproxError("a sampled reset pair escapes the reset relation")
    info = {"theta_dot_fit_rms": rms, "theta_dot_fit_max": worst,
            "inflation": inflate, "n_guard": n_guard}
    return h_S, h_R, info


# -- bundle ---------------------------------------------------------------


def random_table(man: mf.Manifold, box: dict, n: int, seed: int,
                 chunk: int = 20000) -> SampleTable:
    """Sample table at uniformly random points in the box."""
    rng = np.random.default_rng(seed)
    X = np.column_stack([rng.uniform(*box[v], n) for v in VARS])
    res = evaluate_reduced(man, X, chunk=chunk)
    f = np.column_stack([X[:, 1], res["a0"], X[:, 3], np.zeros(n)])
    g = np.column_stack([np.zeros(n), res["a1"], np.zeros(n), np.ones(n)])
    return SampleTable(points=X, f=f, g=g, u_lo=res["u_lo"], u_hi=res["u_hi"],
                       lift_ok=res["lift_ok"], config_ok=res["config_ok"])


@dataclass(frozen=True)
class PolynomialBundle:
    """Everything viability synthesis consumes: polynomial surrogates of
    the reduced dynamics with error bounds, the realizable-input box,
    and semi-algebraic unsafe set, guard, and reset relation."""

    box: dict
    f_p: tuple
    g_p: tuple
    e_p: tuple
    bounds: InputBounds
    unsafe: UnsafeSet
    h_S: SemiAlgebraicSet
    h_R: SemiAlgebraicSet
    seed: int
    stats: dict = field(default_factory=dict, compare=False)


def _eq14_need(table: SampleTable, f_p, g_p, bounds: InputBounds):
    """Required row-1 error bound at each usable sample: worst absolute
    fit deviation over both endpoints of the polynomial input box, zero
    where the box is empty (vacuous)."""
    mask = table.usable
    pts = table.points[mask]
    u_lo_p, u_hi_p = bounds.interval(pts)
    use = u_lo_p <= u_hi_p
    df = table.f[mask, 1] - f_p[1].eval_matrix(pts)
    dg = table.g[mask, 1] - g_p[1].eval_matrix(pts)
    need = np.maximum(np.abs(df + dg * u_lo_p), np.abs(df + dg * u_hi_p))
    return pts, np.where(use, need, 0.0)


def build_bundle(man: mf.Manifold, box: dict = None,
                 grid_counts: tuple = (30, 30, 30, 30),
                 dynamics_degree: int = 3, input_degree: int = 4,
                 error_degree: int = 2,
                 n_calibrate: int = 200000, seed: int = 20260826,
                 min_input_width: float = 1.0, n_guard: int = 10000,
                 input_cushion: float = 0.1, error_cushion: float = 0.02,
                 margin_factor: float = DEFAULT_MARGIN_FACTOR,
                 margin_abs: float = DEFAULT_MARGIN_ABS,
                 tables: tuple | None = None) -> PolynomialBundle:
    """Fit every polynomial object on the grid, then calibrate all
    conservative directions against a large random sample: the input box
    is shifted inward by the worst observed inner-ness violation, the
    error bound is inflated by the worst observed deficit, and the
    unsafe union must cover every unsafe-labeled random point.

    ``tables`` optionally injects precomputed ``(grid, random)`` sample
    tables, skipping the expensive dynamics sampling."""
    if box is None:
        box = default_box(man)
    if tables is None:
        tab = sample_dynamics(man, SampleGrid(box, grid_counts))
        rnd = random_table(man, box, n_calibrate, seed)
    else:
        tab, rnd = tables
    f_p, g_p, dyn_stats = fit_dynamics(tab, box, degree=dynamics_degree)
    # enforcement-based fits see grid and random samples together; the
    # shift/inflation below then only mops up numerical residue
    full = SampleTable.concat([tab, rnd])
    # negative width cap: the fitted box must be empty with slack at
    # torque-infeasible samples, so the narrow-input unsafe piece still
    # covers infeasible pockets between samples
    bounds, in_stats = fit_input_bounds(full, box, degree=input_degree,
                                        cushion_abs=input_cushion,
                                        width_cap=-1.0,
                                        margin_abs=margin_abs)

    # calibrate inner-ness of the input box on the random sample
    feas = rnd.usable & rnd.torque_ok
    pts = rnd.points[feas]
    u_lo_p, u_hi_p = bounds.interval(pts)
    viol_lo = float(np.max(rnd.u_lo[feas] - u_lo_p, initial=0.0))
    viol_hi = float(np.max(u_hi_p - rnd.u_hi[feas], initial=0.0))
    shift_lo = viol_lo * margin_factor + margin_abs if viol_lo > 0 else 0.0
    shift_hi = viol_hi * margin_factor + margin_abs if viol_hi > 0 else 0.0
    bounds = InputBounds(u_min=bounds.u_min + shift_lo,
                         u_max=bounds.u_max - shift_hi,
                         margin_lo=bounds.margin_lo + shift_lo,
                         margin_hi=bounds.margin_hi + shift_hi)
    in_stats.update(calibration_shift_lo=shift_lo,
                    calibration_shift_hi=shift_hi)

    e_p, err_stats = fit_error_bounds(full, f_p, g_p, bounds, box,
                                      degree=error_degree,
                                      margin_factor=margin_factor,
                                      cushion_abs=error_cushion,
                                      margin_abs=margin_abs)
    # calibrate the error bound on the random sample
    rpts, need = _eq14_need(rnd, f_p, g_p, bounds)
    deficit = float(np.max(need - e_p[1].eval_matrix(rpts), initial=0.0))
    if deficit > 0:
        e_p = [e_p[0], e_p[1] + (deficit * margin_factor + margin_abs),
               e_p[2], e_p[3]]
    err_stats.update(calibration_inflation=deficit)

    unsafe, unsafe_stats = fit_unsafe_set(full, box, bounds,
                                          min_input_width=min_input_width)
    escape = ~rnd.safe_labeled & rnd.usable & ~unsafe.contains(rnd.points)
    if escape.any():
        idx = int(np.nonzero(escape)[0][0])
        raise ApproxError(
            f"{int(escape.sum())} unsafe-labeled random points outside "
            f"the unsafe union; first witness x = {rnd.points[idx]}")

    h_S, h_R, reset_stats = fit_guard_and_reset(
        man, box, n_guard=n_guard, seed=seed + 1,
        margin_factor=margin_factor, margin_abs=margin_abs)

    stats = {"seed": seed, "grid_counts": tuple(grid_counts),
             "n_calibrate": n_calibrate, "dynamics": dyn_stats,
             "input_bounds": in_stats, "error_bounds": err_stats,
             "unsafe": unsafe_stats, "reset": reset_stats}
    return PolynomialBundle(box=box, f_p=tuple(f_p), g_p=tuple(g_p),
                            e_p=tuple(e_p), bounds=bounds, unsafe=unsafe,
                            h_S=h_S, h_R=h_R, seed=seed, stats=stats)


def validate_polynomial_data(man: mf.Manifold, bundle: PolynomialBundle,
                             n_random: int = 1000000,
                             n_reset: int = 10000,
                             seed: int = 31415926) -> dict:
    """Random-sampling gate over every approximation direction.

    Draws fresh points (a seed differing from the fitting seed), then
    checks: the exact reduced-dynamics rows, the row-1 error bound at
    both input endpoints, inner-ness of the input box off the unsafe
    set, coverage of unsafe-labeled points, and reset-pair membership.
    Returns a report dict with per-check worst values and witnesses;
    report["passed"] gates the downstream pipeline.
    """
    rnd = random_table(man, bundle.box, n_random, seed)
    report = {"n_random": n_random, "n_reset": n_reset, "seed": seed,
              "checks": {}}

    def record(name, violation, witness, tol=0.0):
        ok = bool(violation <= tol)
        report["checks"][name] = {
            "passed": ok, "worst": float(violation),
            "witness": None if witness is None else
            [float(v) for v in np.atleast_1d(witness)]}
        return ok

    mask = rnd.usable
    pts = rnd.points[mask]

    # exact rows of the polynomial dynamics
    exact = np.abs(np.column_stack([
        rnd.f[mask, 0] - bundle.f_p[0].eval_matrix(pts),
        rnd.f[mask, 2] - bundle.f_p[2].eval_matrix(pts),
        rnd.f[mask, 3] - bundle.f_p[3].eval_matrix(pts),
        rnd.g[mask, 3] - bundle.g_p[3].eval_matrix(pts)]))
    worst = float(exact.max(initial=0.0))
    record("exact-rows", worst,
           pts[np.unravel_index(exact.argmax(), exact.shape)[0]]
           if pts.size else None, tol=1e-9)

    # row-1 error bound at both input endpoints
    rpts, need = _eq14_need(rnd, bundle.f_p, bundle.g_p, bundle.bounds)
    slack = need - bundle.e_p[1].eval_matrix(rpts)
    worst = float(slack.max(initial=-np.inf))
    record("error-bound", worst, rpts[int(slack.argmax())]
           if rpts.size else None)

    # inner-ness of the input box off the unsafe set
    u_lo_p, u_hi_p = bundle.bounds.interval(rnd.points)
    claimed = (u_lo_p <= u_hi_p) & ~bundle.unsafe.contains(rnd.points)
    inner_viol = np.where(
        claimed & rnd.usable,
        np.maximum.reduce([
            np.where(rnd.torque_ok, 0.0, np.inf),    # empty true interval
            rnd.u_lo - u_lo_p, u_hi_p - rnd.u_hi]),
        -np.inf)
    worst = float(inner_viol.max(initial=-np.inf))
    record("input-box-inner", worst,
           rnd.points[int(inner_viol.argmax())] if claimed.any() else None,
           tol=1e-9)

    # unsafe outer-ness
    escape = ~rnd.safe_labeled & ~bundle.unsafe.contains(rnd.points)
    record("unsafe-outer", float(escape.sum()),
           rnd.points[int(np.nonzero(escape)[0][0])] if escape.any()
           else None)

    # reset relation on fresh guard samples
    rng = np.random.default_rng(seed + 1)
    box = bundle.box
    pre = np.column_stack([
        np.full(n_reset, man.theta_max),
        rng.uniform(max(box["theta_dot"][0], 1e-3), box["theta_dot"][1],
                    n_reset),
        rng.uniform(*box["alpha"], n_reset),
        rng.uniform(*box["alpha_dot"], n_reset)])
    post = np.array([mf.manifold_reset(man, x) for x in pre])
    pairs = np.hstack([pre, post])
    miss = ~bundle.h_R.contains(pairs, tol=1e-10)
    record("reset-relation", float(miss.sum()),
           pairs[int(np.nonzero(miss)[0][0])] if miss.any() else None)
    record("guard-outer", float((~bundle.h_S.contains(pairs)).sum()), None)

    member = bundle.unsafe.contains(rnd.points)
    report["conservatism"] = {
        "labeled_unsafe_fraction": float(np.mean(~rnd.safe_labeled)),
        "unsafe_member_fraction": float(np.mean(member)),
        "safe_marked_unsafe_fraction": float(
            np.mean(member & rnd.safe_labeled)
            / max(np.mean(rnd.safe_labeled), 1e-12)),
        "claimed_fraction": float(np.mean(claimed)),
    }
    report["passed"] = all(c["passed"] for c in report["checks"].values())
    return report


# -- bundle files ----------------------------------------------------------

BUNDLE_SCHEMA_VERSION = 1


def report_digest(report: dict) -> str:
    """Stable digest of a validation report."""
    return hashlib.sha256(
        json.dumps(report, sort_keys=True).encode()).hexdigest()


def _poly_lines(name: str, poly: Polynomial):
    yield f"[poly {name} {len(poly.vars)}]"
    for expo in sorted(poly.terms):
        coef = poly.terms[expo]
        yield " ".join(str(e) for e in expo) + " " + repr(float(coef))


def save_bundle(bundle: PolynomialBundle, path,
                validation_digest: str = "",
                provenance: dict | None = None) -> None:
    lines = ["# certified polynomial data for the reduced walking dynamics",
             f"schema_version {BUNDLE_SCHEMA_VERSION}",
             f"seed {bundle.seed}",
             f"validation_digest {validation_digest}"]
    if provenance:
        lines.append("provenance " + json.dumps(provenance, sort_keys=True))
    lines.append("[box]")
    for v in VARS:
        lo, hi = bundle.box[v]
        lines.append(f"{v} {float(lo)!r} {float(hi)!r}")
    lines += ["[margins]",
              f"input_lo {float(bundle.bounds.margin_lo)!r}",
              f"input_hi {float(bundle.bounds.margin_hi)!r}"]
    for i in range(4):
        lines.extend(_poly_lines(f"f{i}", bundle.f_p[i]))
        lines.extend(_poly_lines(f"g{i}", bundle.g_p[i]))
        lines.extend(_poly_lines(f"e{i}", bundle.e_p[i]))
    lines.extend(_poly_lines("u_min", bundle.bounds.u_min))
    lines.extend(_poly_lines("u_max", bundle.bounds.u_max))
    for i, piece in enumerate(bundle.unsafe.pieces):
        lines.append(f"[piece {piece.name} {len(piece.polys)}]")
        for j, p in enumerate(piece.polys):
            lines.extend(_poly_lines(f"piece{i}_{j}", p))
    lines.append(f"[guard {bundle.h_S.name} {len(bundle.h_S.polys)}]")
    for j, p in enumerate(bundle.h_S.polys):
        lines.extend(_poly_lines(f"guard_{j}", p))
    lines.append(f"[reset {bundle.h_R.name} {len(bundle.h_R.polys)}]")
    for j, p in enumerate(bundle.h_R.polys):
        lines.extend(_poly_lines(f"reset_{j}", p))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def load_bundle(path) -> PolynomialBundle:
    with open(path) as fh:
        raw = fh.read().splitlines()

    header = {}
    box = {}
    margins = {}
    polys = {}          # simple named polynomials
    groups = []         # (kind, name, [poly, ...]) for piece/guard/reset
    section = None
    pending_group = None
    cur_name = cur_vars = None
    cur_terms = None

    def finish_poly():
        nonlocal cur_name, cur_terms
        if cur_name is None:
            return
        variables = VARS if cur_vars == 4 else VARS_PAIR
        poly = Polynomial(variables, cur_terms)
        if pending_group is not None:
            pending_group[2].append(poly)
        else:
            polys[cur_name] = poly
        cur_name = cur_terms = None

    for lineno, line in enumerate(raw, 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        try:
            if line.startswith("[poly "):
                finish_poly()
                _, name, nv = line.strip("[]").split()
                cur_name, cur_vars, cur_terms = name, int(nv), {}
                section = "poly"
            elif line.startswith("[piece ") or line.startswith("[guard ") \
                    or line.startswith("[reset "):
                finish_poly()
                kind, name, count = line.strip("[]").split()
                pending_group = (kind, name, [])
                groups.append(pending_group)
                section = None
            elif line.startswith("["):
                finish_poly()
                pending_group = None
                section = line.strip("[]")
            elif section == "poly":
                parts = line.split()
                expo = tuple(int(e) for e in parts[:cur_vars])
                cur_terms[expo] = float(parts[cur_vars])
            elif section == "box":
                v, lo, hi = line.split()
                box[v] = (float(lo), float(hi))
            elif section == "margins":
                k, val = line.split()
                margins[k] = float(val)
            else:
                parts = line.split(None, 1)
                header[parts[0]] = parts[1] if len(parts) > 1 else ""
        except (ValueError, IndexError) as exc:
            raise ApproxError(f"{path}:{lineno}: malformed line: "
                              f"{line!r} ({exc})") from exc
    finish_poly()

    if int(header.get("schema_version", -1)) != BUNDLE_SCHEMA_VERSION:
        raise ApproxError(f"{path}: unsupported schema_version "
                          f"{header.get('schema_version')}")
    missing = ({f"{p}{i}" for p in "fge" for i in range(4)}
               | {"u_min", "u_max"}) - polys.keys()
    if missing:
        raise ApproxError(f"{path}: missing polynomials {sorted(missing)}")
    if set(box) != set(VARS):
        raise ApproxError(f"{path}: box must cover exactly {VARS}")

    pieces = tuple(SemiAlgebraicSet(tuple(ps), name=name)
                   for kind, name, ps in groups if kind == "piece")
    guards = [(name, ps) for kind, name, ps in groups if kind == "guard"]
    resets = [(name, ps) for kind, name, ps in groups if kind == "reset"]
    if not pieces or len(guards) != 1 or len(resets) != 1:
        raise ApproxError(f"{path}: expected unsafe pieces, one guard "
                          "and one reset section")
    bounds = InputBounds(u_min=polys["u_min"], u_max=polys["u_max"],
                         margin_lo=margins.get("input_lo", 0.0),
                         margin_hi=margins.get("input_hi", 0.0))
    return PolynomialBundle(
        box=box,
        f_p=tuple(polys[f"f{i}"] for i in range(4)),
        g_p=tuple(polys[f"g{i}"] for i in range(4)),
        e_p=tuple(polys[f"e{i}"] for i in range(4)),
        bounds=bounds, unsafe=UnsafeSet(pieces),
        h_S=SemiAlgebraicSet(tuple(guards[0][1]), name=guards[0][0]),
        h_R=SemiAlgebraicSet(tuple(resets[0][1]), name=resets[0][0]),
        seed=int(header.get("seed", 0)),
        stats={"validation_digest": header.get("validation_digest", ""),
               **({"provenance": json.loads(header["provenance"])}
                  if "provenance" in header else {})})
