"""Safe input regulation for the reduced walker.

The pipeline implemented here turns a user-level pitch command into a
torque-feasible, safety-filtered pitch acceleration:

    reference --naive_pd--> desired u_alpha
              --qp_saturate--> torque-feasible u_alpha (u0)
              --regulate--> blend of u0 and the certified controller u_s,
                            weighted by a smooth step in the barrier value.

Deep inside the certified region the user's command passes through
unchanged; as the barrier value drops toward zero the certified
controller takes over continuously.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.interpolate import CubicSpline

from . import dynamics as dyn
from . import manifold as man_mod
from .lpqp import solve_box_qp

__all__ = [
    "RegulatorConfig",
    "PitchReference",
    "SaturationResult",
    "smooth_step",
    "regulate",
    "naive_pd",
    "affine_interval",
    "torque_interval",
    "qp_saturate",
    "PieceTracker",
]


@dataclass(frozen=True)
class RegulatorConfig:
    """Parameters of the safety blend and the reference tracker."""

    epsilon: float = 0.1          # blend width in barrier value
    kp: float = 25.0              # pitch PD gains
    kd: float = 10.0
    torque_limit: float = 30.0    # per-joint torque bound, N m
    hysteresis: float = 1e-6      # piece-selection hysteresis in theta

    def __post_init__(self):
        if not 0.0 < self.epsilon < 1.0:
            raise ValueError(f"epsilon must lie in (0, 1), got {self.epsilon}")
        if self.torque_limit <= 0.0:
            raise ValueError("torque_limit must be positive")
        if self.hysteresis < 0.0:
            raise ValueError("hysteresis must be nonnegative")


def smooth_step(v: float, epsilon: float) -> float:
    """C^1 activation weight for the certified controller.

    Returns 0 for v >= epsilon (user in full control), 1 for
    v <= epsilon / 2 (certified controller in full control), and the
    cubic Hermite interpolant in between, so the weight and its
    derivative are continuous everywhere.
    """
    if not 0.0 < epsilon < 1.0:
        raise ValueError(f"epsilon must lie in (0, 1), got {epsilon}")
    if v >= epsilon:
        return 0.0
    if v <= 0.5 * epsilon:
        return 1.0
    t = (epsilon - v) / (0.5 * epsilon)   # 0 at v = epsilon, 1 at epsilon/2
    return t * t * (3.0 - 2.0 * t)


class PieceTracker:
    """Stateful piece selection with boundary hysteresis.

    The certificate is piecewise in theta; re-selecting the piece from
    scratch every step can chatter when theta sits on a boundary.  The
    tracker keeps the current piece until theta leaves it by more than
    the hysteresis width.
    """

    def __init__(self, certificate, hysteresis: float = 1e-6):
        self.certificate = certificate
        self.hysteresis = hysteresis
        self._index: int | None = None

    def select(self, theta: float) -> int:
        edges = self.certificate.theta_edges
        if self._index is not None:
            lo = edges[self._index]
            hi = edges[self._index + 1]
            if lo - self.hysteresis <= theta <= hi + self.hysteresis:
                return self._index
        self._index = int(self.certificate.piece_index(float(theta)))
        return self._index


def _piece_eval(certificate, polys, index: int, xhat) -> float:
    unit = certificate._units(np.atleast_2d(np.asarray(xhat, dtype=float)),
                              index)
    return float(polys[index].eval_matrix(unit)[0])


def regulate(u0: float, xhat, certificate, config: RegulatorConfig,
             tracker: PieceTracker | None = None,
             u_lo: float = -np.inf, u_hi: float = np.inf):
    """Blend the user input with the certified controller.

    Returns (u_r, weight, barrier_value).  u_r equals u0 when the
    barrier value is at least epsilon, equals the certified controller
    output when it is at most epsilon / 2, and interpolates smoothly in
    between; the result is clamped to [u_lo, u_hi].
    """
    theta = float(np.asarray(xhat, dtype=float)[0])
    if tracker is None:
        index = int(certificate.piece_index(theta))
    else:
        index = tracker.select(theta)
    v = _piece_eval(certificate, certificate.v_unit, index, xhat)
    w = smooth_step(v, config.epsilon)
    if w == 0.0:
        u_r = float(u0)
    else:
        u_s = _piece_eval(certificate, certificate.u_unit, index, xhat)
        u_r = float(u0) + (u_s - float(u0)) * w
    return float(np.clip(u_r, u_lo, u_hi)), w, v


@dataclass(frozen=True)
class PitchReference:
    """Desired pitch trajectory alpha_d(t) given as spline knots."""

    t_knots: np.ndarray
    alpha_knots: np.ndarray
    _spline: CubicSpline = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        t = np.asarray(self.t_knots, dtype=float)
        a = np.asarray(self.alpha_knots, dtype=float)
        if t.ndim != 1 or t.shape != a.shape or t.size < 2:
            raise ValueError("reference needs matching 1-D knot arrays")
        if np.any(np.diff(t) <= 0.0):
            raise ValueError("reference knot times must be increasing")
        object.__setattr__(self, "t_knots", t)
        object.__setattr__(self, "alpha_knots", a)
        object.__setattr__(self, "_spline",
                           CubicSpline(t, a, bc_type="clamped"))

    @classmethod
    def constant(cls, alpha: float, horizon: float = 1e3) -> "PitchReference":
        return cls(np.array([0.0, horizon]), np.array([alpha, alpha]))

    @classmethod
    def ramp(cls, alpha_target: float, rise_time: float) -> "PitchReference":
        """Rise smoothly from zero to alpha_target by rise_time and hold
        (queries past the last knot clamp to it)."""
        t = np.linspace(0.0, rise_time, 9)
        s = t / rise_time
        return cls(t, alpha_target * s * s * (3.0 - 2.0 * s))

    def _t(self, t: float) -> float:
        return float(np.clip(t, self.t_knots[0], self.t_knots[-1]))

    def alpha(self, t: float) -> float:
        return float(self._spline(self._t(t)))

    def alpha_dot(self, t: float) -> float:
        return float(self._spline(self._t(t), 1))

    def alpha_ddot(self, t: float) -> float:
        return float(self._spline(self._t(t), 2))

    def save(self, path) -> None:
        with open(path, "w") as fh:
            fh.write("# pitch-reference/1: cubic spline knots, clamped ends\n")
            fh.write("# t alpha\n")
            for t, a in zip(self.t_knots, self.alpha_knots):
                fh.write(f"{t:.17g} {a:.17g}\n")

    @classmethod
    def load(cls, path) -> "PitchReference":
        data = np.loadtxt(path, ndmin=2)
        if data.shape[1] != 2:
            raise ValueError(f"{path}: expected two columns (t, alpha)")
        return cls(data[:, 0], data[:, 1])


def naive_pd(x_alpha, t: float, reference: PitchReference,
             kp: float = 25.0, kd: float = 10.0) -> float:
    """PD-plus-feedforward desired pitch acceleration."""
    alpha, alpha_dot = float(x_alpha[0]), float(x_alpha[1])
    return (kp * (reference.alpha(t) - alpha)
            + kd * (reference.alpha_dot(t) - alpha_dot)
            + reference.alpha_ddot(t))


def affine_interval(u0, u1, torque_limit: float):
    """Interval of scalars s with |u0 + u1 * s| <= torque_limit rowwise.

    Returns (lo, hi); empty intervals are reported as lo > hi."""
    lo, hi = -np.inf, np.inf
    for a, b in zip(u0, u1):
        if b > 0.0:
            lo = max(lo, (-torque_limit - a) / b)
            hi = min(hi, (torque_limit - a) / b)
        elif b < 0.0:
            lo = max(lo, (torque_limit - a) / b)
            hi = min(hi, (-torque_limit - a) / b)
        elif abs(a) > torque_limit:
            return 1.0, -1.0
    return lo, hi


def torque_interval(man, x: dyn.FullState, x_alpha,
                    torque_limit: float = 30.0):
    """Interval of pitch accelerations whose linearizing torques all lie
    in the per-joint box.  Returns (lo, hi); empty when lo > hi."""
    u0, u1 = man_mod.ustar_affine(man, x, x_alpha, strict=False)
    return affine_interval(u0, u1, torque_limit)


@dataclass(frozen=True)
class SaturationResult:
    u: float | None
    feasible: bool
    lo: float
    hi: float


def qp_saturate(man, x: dyn.FullState, x_alpha, u_alpha_d: float,
                torque_limit: float = 30.0) -> SaturationResult:
    """Nearest torque-feasible pitch acceleration to the desired one.

    The linearizing torque is affine in the pitch acceleration, so the
    feasible set is an interval and the QP reduces to a box projection.
    An empty interval is reported as infeasible rather than raised: in
    closed loop it is a failure outcome, not a programming error.
    """
    lo, hi = torque_interval(man, x, x_alpha, torque_limit)
    if lo > hi:
        return SaturationResult(u=None, feasible=False, lo=lo, hi=hi)
    sol = solve_box_qp(np.array([u_alpha_d]), np.array([lo]), np.array([hi]))
    if sol.status != "optimal":
        return SaturationResult(u=None, feasible=False, lo=lo, hi=hi)
    return SaturationResult(u=float(sol.x[0]), feasible=True, lo=lo, hi=hi)
