"""Periodic gait ingestion, phasing, and a fallback spline generator.

A gait is stored as per-joint cubic-spline knots over one stride
``[0, t_max]``.  Ingestion validates that the stance-leg angle is
strictly monotone along the stride, builds the inverse phasing map,
reparameterizes the gait by phase, and reports how well the gait closes
on itself through the impact map.

The shipped generator builds a kinematically reasonable walking stride
by direct spline construction.  It makes no optimality claim; it exists
so the pipeline can run without an external trajectory optimizer.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.interpolate import CubicSpline, PchipInterpolator
from scipy.optimize import brentq

from . import dynamics as dyn
from .model import RELABEL, RobotModel

GAIT_SCHEMA_VERSION = 1

#: Gradient of the phasing coordinate theta(q) = -q1 - q2 - q3/2.
THETA_GRAD = np.array([-1.0, -1.0, -0.5, 0.0, 0.0])

#: Rows of q tracked by the output function (q2 is left to the pivot).
OUTPUT_ROWS = np.array([0, 2, 3, 4])

#: How the shaping parameter shifts the tracked rows: torso -alpha,
#: swing hip +alpha.
ALPHA_PATTERN = np.array([-1.0, 0.0, 1.0, 0.0])


class GaitError(ValueError):
    pass


def theta_of(q) -> float:
    """Stance-leg angle, the phasing coordinate."""
    return float(THETA_GRAD @ np.asarray(q, dtype=float))


def theta_dot_of(q, qdot) -> float:
    return float(THETA_GRAD @ np.asarray(qdot, dtype=float))


@dataclass
class PeriodicGait:
    """An ingested stride with phasing maps.

    ``joint_splines`` are per-joint cubic splines over stride time;
    ``q_of_theta`` gives the tracked joint rows (q1, q3, q4, q5) as a
    function of phase for the output-function machinery.
    """

    t_max: float
    joint_splines: list
    theta_min: float
    theta_max: float
    metadata: dict = field(default_factory=dict)

    # built in __post_init__
    _t_of_theta: PchipInterpolator = None
    q_of_theta: CubicSpline = None

    def __post_init__(self):
        ts = np.linspace(0.0, self.t_max, 800)
        thetas = np.array([theta_of(self.q(t)) for t in ts])
        self._t_of_theta = PchipInterpolator(thetas, ts)
        rows = np.array([self.q(t)[OUTPUT_ROWS] for t in ts])
        self.q_of_theta = CubicSpline(thetas, rows, axis=0)

    def q(self, t) -> np.ndarray:
        return np.array([float(s(t)) for s in self.joint_splines])

    def qdot(self, t) -> np.ndarray:
        return np.array([float(s(t, 1)) for s in self.joint_splines])

    def theta(self, t) -> float:
        return theta_of(self.q(t))

    def t_of_theta(self, theta) -> float:
        if not self.theta_min - 1e-9 <= theta <= self.theta_max + 1e-9:
            raise GaitError(f"phase {theta} outside [{self.theta_min}, {self.theta_max}]")
        return float(np.clip(self._t_of_theta(theta), 0.0, self.t_max))

    def tracked_rows(self, theta, deriv: int = 0) -> np.ndarray:
        """(q1, q3, q4, q5) targets and their phase derivatives."""
        return np.asarray(self.q_of_theta(theta, deriv), dtype=float)

    @property
    def stride_duration(self) -> float:
        return self.t_max


def _spline_knots(gait_dict):
    t = gait_dict["t"]
    return [CubicSpline(t, gait_dict[f"q{j+1}"]) for j in range(5)]


def ingest(t_knots, q_knots, model: RobotModel, metadata=None,
           periodicity_warn: float = 0.5) -> PeriodicGait:
    """Build a validated PeriodicGait from knot data.

    Raises GaitError when the phasing coordinate is not strictly
    monotone; a poor velocity-level closure through the impact map is
    recorded as a warning in the metadata, not an error.
    """
    t_knots = np.asarray(t_knots, dtype=float)
    q_knots = np.asarray(q_knots, dtype=float)  # (n, 5)
    if t_knots.ndim != 1 or q_knots.shape != (t_knots.size, 5):
        raise GaitError("knot table must be (n,) times with (n, 5) joint values")
    t_max = float(t_knots[-1])
    splines = [CubicSpline(t_knots, q_knots[:, j]) for j in range(5)]

    ts = np.linspace(0.0, t_max, 2000)
    theta_vals = np.array([theta_of([s(t) for s in splines]) for t in ts])
    dtheta = np.diff(theta_vals)
    if np.any(dtheta <= 0.0):
        bad = int(np.argmin(dtheta))
        raise GaitError(
            f"phasing coordinate not strictly increasing on t in "
            f"[{ts[bad]:.6f}, {ts[bad + 1]:.6f}]"
        )

    meta = dict(metadata or {})
    gait = PeriodicGait(
        t_max=t_max,
        joint_splines=splines,
        theta_min=float(theta_vals[0]),
        theta_max=float(theta_vals[-1]),
        metadata=meta,
    )

    # Closure through the impact map.
    q_end, qd_end = gait.q(t_max), gait.qdot(t_max)
    q0, qd0 = gait.q(0.0), gait.qdot(0.0)
    config_residual = float(np.max(np.abs(q_end[RELABEL] - q0)))
    try:
        qd_plus = dyn.impact_velocity_map(model, q_end) @ qd_end
        velocity_residual = float(np.max(np.abs(qd_plus - qd0)))
    except dyn.SingularImpactError:
        velocity_residual = np.inf
    meta["periodicity_config_residual"] = config_residual
    meta["periodicity_velocity_residual"] = velocity_residual
    if config_residual > 1e-6:
        raise GaitError(
            f"gait does not close through leg relabeling (residual {config_residual:.2e})"
        )
    if velocity_residual > periodicity_warn:
        meta.setdefault("warnings", []).append(
            f"velocity-level periodicity residual {velocity_residual:.3g} rad/s; "
            "the invariance correction will absorb it"
        )
    return gait


def load_gait(path, model: RobotModel) -> PeriodicGait:
    """Parse, validate and ingest a gait file."""
    meta = {}
    knots = {}
    t_max = None
    schema = None
    section = None
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if line.startswith("["):
                section = line.strip("[] ")
                continue
            if "=" not in line:
                raise GaitError(f"line {lineno}: expected 'key = value'")
            key, _, value = (p.strip() for p in line.partition("="))
            if section == "knots":
                try:
                    knots[key] = np.array([float(v) for v in value.split()])
                except ValueError:
                    raise GaitError(f"line {lineno}: bad number in knot row {key!r}") from None
            elif key == "schema_version":
                schema = int(value)
            elif key == "t_max":
                t_max = float(value)
            else:
                meta[key] = value
    if schema != GAIT_SCHEMA_VERSION:
        raise GaitError(f"unsupported gait schema_version {schema}")
    if t_max is None:
        raise GaitError("missing t_max")
    for key in ("t", "q1", "q2", "q3", "q4", "q5"):
        if key not in knots:
            raise GaitError(f"missing knot row {key!r}")
    q_knots = np.column_stack([knots[f"q{j+1}"] for j in range(5)])
    return ingest(knots["t"], q_knots, model, metadata=meta)


def write_gait(path, t_knots, q_knots, metadata=None) -> None:
    lines = [f"schema_version = {GAIT_SCHEMA_VERSION}", f"t_max = {float(t_knots[-1])!r}"]
    for key, value in (metadata or {}).items():
        lines.append(f"{key} = {value}")
    lines.append("[knots]")
    lines.append("t = " + " ".join(repr(float(v)) for v in t_knots))
    q_knots = np.asarray(q_knots)
    for j in range(5):
        lines.append(f"q{j+1} = " + " ".join(repr(float(v)) for v in q_knots[:, j]))
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def generate_spline_gait(
    model: RobotModel,
    theta_max: float = 0.15,
    stride_time: float = 0.45,
    torso_pitch: float = 0.03,
    stance_knee: float = -0.12,
    stance_knee_flex: float = 0.03,
    swing_knee_lift: float = 0.25,
    n_knots: int = 31,
):
    """Construct a relabel-periodic walking stride by direct splines.

    Returns ``(t_knots, q_knots)`` ready for :func:`ingest` or
    :func:`write_gait`.  The stride is symmetric in phase,
    ``theta in [-theta_max, theta_max]``, and closes exactly at
    configuration level through the leg swap.  Velocity-level closure is
    approximate and is reported by ingestion.
    """
    theta_min = -theta_max
    kappa = stance_knee

    l_th, l_sh = model.lengths["thigh"], model.lengths["shin"]

    def touchdown_height(kappa_sw):
        # stance leg at theta_max with knee kappa, swing leg placed for
        # phase -theta_max after relabeling with knee kappa_sw
        a_th = -theta_max - kappa / 2.0
        a_sh = a_th + kappa
        b_th = theta_max - kappa_sw / 2.0
        b_sh = b_th + kappa_sw
        return float(
            l_th * (np.cos(a_th) - np.cos(b_th)) + l_sh * (np.cos(a_sh) - np.cos(b_sh))
        )

    # swing knee angle at touchdown that puts the swing foot on the ground
    lo, hi = kappa - 0.6, min(kappa + 0.6, -1e-6)
    if touchdown_height(lo) * touchdown_height(hi) > 0:
        kappa_sw = kappa  # symmetric legs close exactly
    else:
        kappa_sw = brentq(touchdown_height, lo, hi, xtol=1e-14)

    tau = np.linspace(0.0, 1.0, n_knots)
    theta = theta_min + (theta_max - theta_min) * tau
    q1 = np.full_like(tau, torso_pitch)
    # stance knee: kappa_sw at the stride start (it was the swing knee),
    # kappa at touchdown, with a mild mid-stance flexion
    q3 = kappa_sw + (kappa - kappa_sw) * tau - stance_knee_flex * np.sin(np.pi * tau)
    q2 = -theta - q1 - q3 / 2.0
    # swing hip travels between the stance-hip endpoint values
    q4_start = -theta_max - torso_pitch - kappa / 2.0
    q4_end = theta_max - torso_pitch - kappa_sw / 2.0
    s = 3 * tau**2 - 2 * tau**3
    q4 = q4_start + (q4_end - q4_start) * s
    # swing knee: starts at the old stance-knee value, flexes for ground
    # clearance, extends to its touchdown value
    q5 = kappa + (kappa_sw - kappa) * tau - swing_knee_lift * np.sin(np.pi * tau) ** 2

    q_knots = np.column_stack([q1, q2, q3, q4, q5])
    # enforce exact configuration closure through the relabeling
    q_knots[-1] = q_knots[0][np.argsort(RELABEL)]
    return tau * stride_time, q_knots
