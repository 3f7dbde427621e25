"""Controlled hybrid-zero-dynamics layer.

The walking controller zeroes a four-dimensional output

    h(q, alpha) = S q + P alpha - q_d(theta(q)) + h_m(theta(q), alpha)

where S selects the actuated-shape rows (q1, q3, q4, q5), P shifts the
torso and swing-hip targets by the pitch shaping parameter alpha, q_d is
the phase-indexed gait, and h_m is an invariance correction that makes
the zero set of h closed under the impact map.  States on the zero
manifold are coordinatized by xhat = (theta, theta_dot, alpha,
alpha_dot); alpha evolves as a double integrator driven by the shaping
input u_alpha.

h_m construction.  Write h_m = c1(alpha) p_m(theta) with p_m a cubic
vanishing at both phase endpoints and carrying unit slope at theta_min.
At a guard point the impact maps the pre-impact manifold velocity space
into full-model velocities; requiring the image to land back on the
manifold fixes the slope of h at theta_min, which is exactly the
4-vector c1.  Two structural facts make this single correction enough:

* the alpha_dot velocity channel is invariant for free: the velocity
  direction that trades pitch against the hips, (1, -1, 0, -1, 0),
  keeps both legs' absolute angles fixed, so it produces no impact
  impulse and relabels to itself;
* the theta_dot channel gives four linear equations in c1 per alpha,
  solved in closed form.

c1(alpha) is then fitted as a Chebyshev series so its derivatives in
alpha are smooth and exact.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.polynomial import chebyshev as C

from . import dynamics as dyn
from .gait import ALPHA_PATTERN, OUTPUT_ROWS, THETA_GRAD, PeriodicGait, theta_of
from .model import RELABEL, RobotModel

#: Selection matrix for the tracked joint rows.
S_SELECT = np.zeros((4, 5))
S_SELECT[np.arange(4), OUTPUT_ROWS] = 1.0

DEFAULT_KP = 100.0
DEFAULT_KD = 20.0
COND_LIMIT = 1e8


class ManifoldError(RuntimeError):
    pass


class LiftError(ManifoldError):
    pass


def _hermite(theta, a, b, deriv: int = 0):
    """Cubic on [a, b], zero at both ends, slopes (1, 0) at (a, b)."""
    width = b - a
    s = (theta - a) / width
    if deriv == 0:
        return width * (s - 2 * s**2 + s**3)
    if deriv == 1:
        return 1 - 4 * s + 3 * s**2
    return (-4 + 6 * s) / width


@dataclass
class Manifold:
    """Immutable bundle of model, gait, working box, and h_m fit."""

    model: RobotModel
    gait: PeriodicGait
    alpha_range: tuple
    # Chebyshev coefficient matrix, shape (deg + 1, 4), domain mapped
    # from [-alpha_fit, alpha_fit] to [-1, 1]
    c1_coef: np.ndarray
    alpha_fit: float
    kp: float = DEFAULT_KP
    kd: float = DEFAULT_KD
    phase_pad: float = 1e-9

    _c1_d: np.ndarray = field(default=None, repr=False)
    _c1_dd: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        scale = 1.0 / self.alpha_fit
        self._c1_d = C.chebder(self.c1_coef, 1, scl=scale, axis=0)
        self._c1_dd = C.chebder(self.c1_coef, 2, scl=scale, axis=0)

    @property
    def theta_min(self) -> float:
        return self.gait.theta_min

    @property
    def theta_max(self) -> float:
        return self.gait.theta_max

    def _check_phase(self, theta, pad=None):
        pad = self.phase_pad if pad is None else pad
        if not self.theta_min - pad <= theta <= self.theta_max + pad:
            raise ManifoldError(
                f"phase {theta} outside [{self.theta_min}, {self.theta_max}]")

    def _coef(self, alpha):
        s = alpha / self.alpha_fit
        return (C.chebval(s, self.c1_coef), C.chebval(s, self._c1_d),
                C.chebval(s, self._c1_dd))

    def hm(self, theta, alpha, strict: bool = True):
        if strict:
            self._check_phase(theta)
        c1, *_ = self._coef(alpha)
        return c1 * _hermite(theta, self.theta_min, self.theta_max)

    # -- output function and derivatives -------------------------------

    def _w_derivs(self, theta, alpha):
        """Gait-plus-correction term w(theta, alpha) = -q_d + h_m and
        its partials up to second order."""
        a, b = self.theta_min, self.theta_max
        c1, c1d, c1dd = self._coef(alpha)
        pm = [_hermite(theta, a, b, k) for k in range(3)]
        qd = [self.gait.tracked_rows(theta, k) for k in range(3)]
        w = -qd[0] + c1 * pm[0]
        w_t = -qd[1] + c1 * pm[1]
        w_tt = -qd[2] + c1 * pm[2]
        w_a = c1d * pm[0]
        w_ta = c1d * pm[1]
        w_aa = c1dd * pm[0]
        return w, w_t, w_tt, w_a, w_ta, w_aa

    def h(self, q, alpha, strict: bool = True):
        q = np.asarray(q, dtype=float)
        theta = theta_of(q)
        if strict:
            self._check_phase(theta)
        w, *_ = self._w_derivs(theta, alpha)
        return q[OUTPUT_ROWS] + ALPHA_PATTERN * alpha + w

    def h_derivs(self, q, alpha, strict: bool = True):
        """h and all partials needed for feedback linearization.

        Returns (h, Hq, Ha, Hqq, Hqa, Haa) where Hqq is the (4, 5, 5)
        second derivative in q, Hqa the mixed partial and Haa the second
        alpha partial.
        """
        q = np.asarray(q, dtype=float)
        theta = theta_of(q)
        if strict:
            self._check_phase(theta)
        w, w_t, w_tt, w_a, w_ta, w_aa = self._w_derivs(theta, alpha)
        h = q[OUTPUT_ROWS] + ALPHA_PATTERN * alpha + w
        Hq = S_SELECT + np.outer(w_t, THETA_GRAD)
        Ha = ALPHA_PATTERN + w_a
        Hqq = w_tt[:, None, None] * np.outer(THETA_GRAD, THETA_GRAD)[None]
        Hqa = np.outer(w_ta, THETA_GRAD)
        Haa = w_aa
        return h, Hq, Ha, Hqq, Hqa, Haa

    def h_dot(self, q, qdot, alpha, alpha_dot, strict: bool = True):
        _, Hq, Ha, *_ = self.h_derivs(q, alpha, strict=strict)
        return Hq @ np.asarray(qdot, dtype=float) + Ha * alpha_dot


def _endpoint_config(gait: PeriodicGait, theta, alpha):
    """On-manifold configuration at a phase endpoint (h_m vanishes)."""
    A = np.vstack([S_SELECT, THETA_GRAD])
    rhs = np.concatenate([gait.tracked_rows(theta) - ALPHA_PATTERN * alpha, [theta]])
    return np.linalg.solve(A, rhs)


def _solve_correction(model, gait, alpha):
    """Start-slope coefficient of h_m at one value of alpha.

    On the guard slice the impact sends the unit-theta_dot manifold
    velocity v_theta to D v_theta; the correction slope c1 must cancel
    the tracked-row mismatch of that image, which is a linear condition
    per output row.
    """
    th_min, th_max = gait.theta_min, gait.theta_max
    q_minus = _endpoint_config(gait, th_max, alpha)
    D = dyn.impact_velocity_map(model, q_minus)

    # pre-impact velocity with unit theta_dot, zero alpha_dot:
    # Hq qdot = 0, r qdot = 1 (h_m vanishes at th_max, so no c1 here)
    A_minus = np.vstack(
        [S_SELECT + np.outer(-gait.tracked_rows(th_max, 1), THETA_GRAD), THETA_GRAD])
    v_theta = np.linalg.solve(A_minus, np.r_[np.zeros(4), 1.0])

    v_plus = D @ v_theta
    tau = float(THETA_GRAD @ v_plus)  # post-impact theta_dot per unit theta_dot
    if abs(tau) < 1e-10:
        raise ManifoldError(
            f"correction solve singular at alpha = {alpha}: "
            "impact annihilates the phase velocity")
    return gait.tracked_rows(th_min, 1) - (S_SELECT @ v_plus) / tau


def build_manifold(model: RobotModel, gait: PeriodicGait,
                   alpha_range=(-0.35, 0.35), fit_degree: int = 16,
                   fit_pad: float = 1.10, **kwargs) -> Manifold:
    """Fit the invariance correction over the working alpha range."""
    alpha_fit = fit_pad * max(abs(alpha_range[0]), abs(alpha_range[1]))
    n_nodes = fit_degree + 1
    nodes = np.cos(np.pi * (2 * np.arange(n_nodes) + 1) / (2 * n_nodes))
    sols = np.array([_solve_correction(model, gait, alpha_fit * s) for s in nodes])
    c1_coef = C.chebfit(nodes, sols, fit_degree)
    return Manifold(model=model, gait=gait, alpha_range=tuple(alpha_range),
                    c1_coef=c1_coef, alpha_fit=alpha_fit, **kwargs)


# -- spec-facing operations -------------------------------------------


def output_h(man: Manifold, q, alpha):
    return man.h(q, alpha)


def hm_correction(man: Manifold, theta, alpha):
    return man.hm(theta, alpha)


def lift(man: Manifold, xhat, strict: bool = True) -> dyn.FullState:
    """On-manifold full state for reduced coordinates xhat.

    h is affine in q once theta(q) is pinned, so the lift is a pair of
    exact linear solves rather than the generic Newton iteration.
    """
    theta, theta_dot, alpha, alpha_dot = xhat
    if strict:
        man._check_phase(theta)
    w, *_ = man._w_derivs(theta, alpha)
    A = np.vstack([S_SELECT, THETA_GRAD])
    q = np.linalg.solve(A, np.concatenate([-ALPHA_PATTERN * alpha - w, [theta]]))
    _, Hq, Ha, *_ = man.h_derivs(q, alpha, strict=False)
    try:
        qdot = np.linalg.solve(np.vstack([Hq, THETA_GRAD]),
                               np.concatenate([-Ha * alpha_dot, [theta_dot]]))
    except np.linalg.LinAlgError:
        raise LiftError(f"lift velocity solve singular at xhat = {xhat}") from None
    state = dyn.FullState(q, qdot)
    res = max(np.max(np.abs(man.h(q, alpha, strict=False))),
              np.max(np.abs(man.h_dot(q, qdot, alpha, alpha_dot, strict=False))))
    if not np.isfinite(res) or res > 1e-10:
        raise LiftError(f"lift residual {res:.3e} at xhat = {xhat}")
    return state


def ustar(man: Manifold, x: dyn.FullState, x_alpha, u_alpha: float,
          strict: bool = True) -> np.ndarray:
    """Feedback-linearizing torque tracking the shaped outputs."""
    u0, u1 = ustar_affine(man, x, x_alpha, strict=strict)
    return u0 + u1 * u_alpha


def ustar_affine(man: Manifold, x: dyn.FullState, x_alpha, strict: bool = True):
    """Split ustar into (u0, u1) with ustar = u0 + u1 * u_alpha."""
    alpha, alpha_dot = x_alpha
    q, qdot = x.q, x.qdot
    h, Hq, Ha, Hqq, Hqa, Haa = man.h_derivs(q, alpha, strict=strict)
    M = dyn.mass_matrix(man.model, q)
    bias = dyn.coriolis_matrix(man.model, q, qdot) @ qdot + dyn.gravity_vector(man.model, q)
    Minv_B = np.linalg.solve(M, dyn.B_INPUT)
    Minv_b = np.linalg.solve(M, bias)
    decouple = Hq @ Minv_B
    cond = np.linalg.cond(decouple)
    if not np.isfinite(cond) or cond > COND_LIMIT:
        raise ManifoldError(
            f"decoupling matrix near singular (cond {cond:.3e})")
    h_dot = Hq @ qdot + Ha * alpha_dot
    drift = (np.einsum("ijk,j,k->i", Hqq, qdot, qdot)
             + 2.0 * alpha_dot * (Hqa @ qdot)
             + Haa * alpha_dot**2
             - Hq @ Minv_b)
    target0 = -man.kp * h - man.kd * h_dot - drift
    u0 = np.linalg.solve(decouple, target0)
    u1 = np.linalg.solve(decouple, -Ha)
    return u0, u1


def manifold_dynamics(man: Manifold, xhat, strict: bool = True):
    """Reduced vector fields: xhat_dot = f(xhat) + g(xhat) u_alpha."""
    theta, theta_dot, alpha, alpha_dot = xhat
    state = lift(man, xhat, strict=strict)
    u0, u1 = ustar_affine(man, state, (alpha, alpha_dot), strict=strict)
    M = dyn.mass_matrix(man.model, state.q)
    bias = (dyn.coriolis_matrix(man.model, state.q, state.qdot) @ state.qdot
            + dyn.gravity_vector(man.model, state.q))
    r_Minv = np.linalg.solve(M.T, THETA_GRAD)
    a0 = r_Minv @ (dyn.B_INPUT @ u0 - bias)
    a1 = r_Minv @ (dyn.B_INPUT @ u1)
    f = np.array([theta_dot, a0, alpha_dot, 0.0])
    g = np.array([0.0, a1, 0.0, 1.0])
    return f, g


def manifold_guard(man: Manifold, xhat, tol: float = 1e-8) -> bool:
    theta, theta_dot = xhat[0], xhat[1]
    return abs(theta - man.theta_max) <= tol and theta_dot > 0.0


def manifold_reset(man: Manifold, xhat):
    """Impact update in reduced coordinates: (alpha, alpha_dot) pass
    through; (theta, theta_dot) re-projected after the full impact."""
    if not manifold_guard(man, xhat, tol=1e-6):
        raise ManifoldError(f"reset called off the guard: xhat = {xhat}")
    theta, theta_dot, alpha, alpha_dot = xhat
    state = lift(man, (man.theta_max, theta_dot, alpha, alpha_dot))
    post = dyn.impact_map(man.model, state)
    return np.array([theta_of(post.q), THETA_GRAD @ post.qdot, alpha, alpha_dot])
