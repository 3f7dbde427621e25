"""Hybrid closed-loop simulation of the walker.

Two simulators share the same trace format and outcome taxonomy:

* ``simulate_reduced`` integrates the 4-D reduced state under a scalar
  pitch-acceleration law, with the stride reset applied at the phase
  guard.  It is the cheap tool for certifying barrier claims.
* ``simulate_hybrid`` integrates the full pinned five-link dynamics
  (augmented with the pitch-shaping states) under a controller built
  from the regulator pipeline, with impact resets localized by event
  root finding.

Outcomes are one of four machine-comparable tags so batches of
experiments can be compared directly.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field

import numpy as np
from scipy.integrate import solve_ivp

from . import dynamics as dyn
from . import manifold as man_mod
from .gait import THETA_GRAD, theta_of, theta_dot_of
from .regulator import (PitchReference, RegulatorConfig, affine_interval,
                        naive_pd, regulate, smooth_step, PieceTracker)
from .lpqp import solve_box_qp

__all__ = [
    "OUTCOMES",
    "SimConfig",
    "SimTrace",
    "Command",
    "NaiveController",
    "SafeController",
    "nominal_start",
    "simulate_reduced",
    "simulate_hybrid",
    "tracking_experiment",
]

OUTCOME_COMPLETED = "completed"
OUTCOME_FELL_BACKWARD = "fell-backward"
OUTCOME_TORQUE_INFEASIBLE = "torque-infeasible"
OUTCOME_INFEASIBLE_CONFIG = "infeasible-config"
OUTCOMES = (OUTCOME_COMPLETED, OUTCOME_FELL_BACKWARD,
            OUTCOME_TORQUE_INFEASIBLE, OUTCOME_INFEASIBLE_CONFIG)


@dataclass(frozen=True)
class SimConfig:
    """Integration and sampling parameters."""

    rtol: float = 1e-9
    atol: float = 1e-9
    dt_sample: float = 1e-3      # trace sampling period
    chunk: float = 0.02          # integration window between failure checks
    max_stride_time: float = 3.0
    guard_tol: float = 1e-8

    def __post_init__(self):
        if self.dt_sample <= 0.0 or self.chunk <= 0.0:
            raise ValueError("sampling and chunk periods must be positive")


@dataclass(frozen=True)
class Command:
    """One controller evaluation: the applied pitch acceleration plus
    everything worth logging about how it was produced.

    Controllers never raise on an empty torque-feasible interval — the
    integrator probes trial states past guard crossings where the
    feedback linearization degenerates, and an exception there would
    preempt event localization.  Infeasibility is flagged and acted on
    by the simulator at actual trajectory samples.
    """

    u_apply: float
    u_desired: float
    u_saturated: float
    torques: np.ndarray
    v: float = np.nan
    w: float = 0.0
    feasible: bool = True


class NaiveController:
    """Reference tracker with torque saturation and no safety filter."""

    mode = "naive"

    def __init__(self, man, reference: PitchReference,
                 config: RegulatorConfig | None = None):
        self.man = man
        self.reference = reference
        self.config = config or RegulatorConfig()

    def command(self, t: float, x: dyn.FullState, x_alpha) -> Command:
        u_d = naive_pd(x_alpha, t, self.reference,
                       self.config.kp, self.config.kd)
        u0, u1 = man_mod.ustar_affine(self.man, x, x_alpha, strict=False)
        lo, hi = affine_interval(u0, u1, self.config.torque_limit)
        if lo > hi:
            u_sat = 0.5 * (lo + hi)   # least-violating fallback
            return Command(u_apply=u_sat, u_desired=u_d, u_saturated=u_sat,
                           torques=u0 + u1 * u_sat, feasible=False)
        sol = solve_box_qp(np.array([u_d]), np.array([lo]), np.array([hi]))
        u_sat = float(sol.x[0])
        return Command(u_apply=u_sat, u_desired=u_d, u_saturated=u_sat,
                       torques=u0 + u1 * u_sat)


class SafeController:
    """Reference tracker with torque saturation and the certified
    safety regulator on top."""

    mode = "safe"

    def __init__(self, man, reference: PitchReference, certificate,
                 config: RegulatorConfig | None = None):
        self.man = man
        self.reference = reference
        self.certificate = certificate
        self.config = config or RegulatorConfig()
        self.tracker = PieceTracker(certificate, self.config.hysteresis)

    def command(self, t: float, x: dyn.FullState, x_alpha) -> Command:
        u_d = naive_pd(x_alpha, t, self.reference,
                       self.config.kp, self.config.kd)
        u0, u1 = man_mod.ustar_affine(self.man, x, x_alpha, strict=False)
        lo, hi = affine_interval(u0, u1, self.config.torque_limit)
        xhat = (theta_of(x.q), theta_dot_of(x.q, x.qdot),
                float(x_alpha[0]), float(x_alpha[1]))
        if lo > hi:
            u_r, w, v = regulate(0.5 * (lo + hi), xhat, self.certificate,
                                 self.config, tracker=self.tracker)
            return Command(u_apply=u_r, u_desired=u_d,
                           u_saturated=0.5 * (lo + hi),
                           torques=u0 + u1 * u_r, v=v, w=w, feasible=False)
        sol = solve_box_qp(np.array([u_d]), np.array([lo]), np.array([hi]))
        u_sat = float(sol.x[0])
        u_r, w, v = regulate(u_sat, xhat, self.certificate, self.config,
                             tracker=self.tracker, u_lo=lo, u_hi=hi)
        return Command(u_apply=u_r, u_desired=u_d, u_saturated=u_sat,
                       torques=u0 + u1 * u_r, v=v, w=w)


@dataclass
class SimTrace:
    """Time-stamped record of one closed-loop run."""

    t: np.ndarray                # (N,)
    xhat: np.ndarray             # (N, 4): theta, theta_dot, alpha, alpha_dot
    v: np.ndarray                # (N,) barrier value (NaN without a certificate)
    w: np.ndarray                # (N,) regulator activation weight
    u_desired: np.ndarray        # (N,)
    u_saturated: np.ndarray      # (N,)
    u_regulated: np.ndarray      # (N,)
    torques: np.ndarray          # (N, 4) (NaN rows for reduced runs)
    full: np.ndarray | None      # (N, 10) full state, None for reduced runs
    events: list                 # [{"t": float, "kind": str}, ...]
    outcome: str
    strides: int
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        if np.any(np.diff(self.t) < 0.0):
            raise ValueError("trace timestamps must be nondecreasing")
        if self.outcome not in OUTCOMES:
            raise ValueError(f"unknown outcome tag {self.outcome!r}")

    @property
    def failed(self) -> bool:
        return self.outcome != OUTCOME_COMPLETED

    def save(self, path) -> None:
        header = {
            "format": "sim-trace/1",
            "outcome": self.outcome,
            "strides": self.strides,
            "events": self.events,
            "has_full_state": self.full is not None,
            "metadata": self.metadata,
        }
        cols = ["t", "theta", "theta_dot", "alpha", "alpha_dot", "v", "w",
                "u_desired", "u_saturated", "u_regulated",
                "tau1", "tau2", "tau3", "tau4"]
        blocks = [self.t[:, None], self.xhat, self.v[:, None],
                  self.w[:, None], self.u_desired[:, None],
                  self.u_saturated[:, None], self.u_regulated[:, None],
                  self.torques]
        if self.full is not None:
            cols += [f"q{i}" for i in range(5)] + [f"qd{i}" for i in range(5)]
            blocks.append(self.full)
        table = np.hstack(blocks)
        with open(path, "w") as fh:
            fh.write("# " + json.dumps(header) + "\n")
            fh.write("# " + " ".join(cols) + "\n")
            np.savetxt(fh, table, fmt="%.12g")

    @classmethod
    def load(cls, path) -> "SimTrace":
        with open(path) as fh:
            header = json.loads(fh.readline().lstrip("# "))
            fh.readline()
            table = np.loadtxt(fh, ndmin=2)
        if header.get("format") != "sim-trace/1":
            raise ValueError(f"{path}: not a simulation trace file")
        full = table[:, 14:24] if header["has_full_state"] else None
        return cls(t=table[:, 0], xhat=table[:, 1:5], v=table[:, 5],
                   w=table[:, 6], u_desired=table[:, 7],
                   u_saturated=table[:, 8], u_regulated=table[:, 9],
                   torques=table[:, 10:14], full=full,
                   events=header["events"], outcome=header["outcome"],
                   strides=header["strides"], metadata=header["metadata"])


class _Recorder:
    def __init__(self):
        self.rows = []
        self._last = -np.inf

    def add(self, t, xhat, cmd: Command, full=None):
        # Sample grids are rebuilt per integration chunk; guard against
        # sub-femtosecond backward rounding at chunk boundaries.
        t = max(float(t), self._last)
        self._last = t
        self.rows.append((t, np.asarray(xhat, dtype=float),
                          cmd, None if full is None else np.asarray(full)))

    def build(self, events, outcome, strides, metadata,
              with_full) -> SimTrace:
        n = len(self.rows)
        t = np.empty(n)
        xhat = np.empty((n, 4))
        v = np.empty(n)
        w = np.empty(n)
        u_d = np.empty(n)
        u_s = np.empty(n)
        u_r = np.empty(n)
        tau = np.full((n, 4), np.nan)
        full = np.empty((n, 10)) if with_full else None
        for i, (ti, xh, cmd, fl) in enumerate(self.rows):
            t[i] = ti
            xhat[i] = xh
            v[i] = cmd.v
            w[i] = cmd.w
            u_d[i] = cmd.u_desired
            u_s[i] = cmd.u_saturated
            u_r[i] = cmd.u_apply
            if cmd.torques is not None:
                tau[i] = cmd.torques
            if with_full:
                full[i] = fl
        return SimTrace(t=t, xhat=xhat, v=v, w=w, u_desired=u_d,
                        u_saturated=u_s, u_regulated=u_r, torques=tau,
                        full=full, events=events, outcome=outcome,
                        strides=strides, metadata=metadata)


def nominal_start(man) -> dyn.FullState:
    """Full state at the start of the nominal stride (alpha = 0 gait)."""
    return dyn.FullState(man.gait.q(0.0), man.gait.qdot(0.0))


# -- reduced-model simulation ---------------------------------------------


def simulate_reduced(man, control, xhat0, n_strides: int = 10,
                     certificate=None,
                     config: SimConfig | None = None) -> SimTrace:
    """Closed-loop reduced simulation of ``n_strides`` strides.

    ``control(t, xhat) -> u_alpha`` is the scalar pitch-acceleration
    law.  When a certificate is given, its barrier value is logged at
    every sample and used for the activation weight column.
    """
    config = config or SimConfig()
    tracker = (PieceTracker(certificate) if certificate is not None else None)

    def diag(xhat):
        if certificate is None:
            return np.nan, 0.0
        idx = tracker.select(float(xhat[0]))
        unit = certificate._units(np.atleast_2d(xhat), idx)
        return float(certificate.v_unit[idx].eval_matrix(unit)[0]), 0.0

    def rhs(t, xhat):
        f, g = man_mod.manifold_dynamics(man, xhat, strict=False)
        return f + g * control(t, xhat)

    def guard_event(t, xhat):
        return xhat[0] - man.theta_max
    guard_event.terminal = True
    guard_event.direction = 1.0

    def fell_event(t, xhat):
        return xhat[1]
    fell_event.terminal = True
    fell_event.direction = -1.0

    rec = _Recorder()
    events = []
    outcome = OUTCOME_COMPLETED
    strides = 0
    t = 0.0
    xhat = np.asarray(xhat0, dtype=float).copy()
    horizon = n_strides * config.max_stride_time

    def record(ti, xh):
        v, w = diag(xh)
        rec.add(ti, xh, Command(u_apply=control(ti, xh), u_desired=np.nan,
                                u_saturated=np.nan, torques=None, v=v, w=w))

    try:
        while strides < n_strides and t < horizon:
            t_end = min(t + config.max_stride_time, horizon)
            sol = solve_ivp(rhs, (t, t_end), xhat, method="RK45",
                            rtol=config.rtol, atol=config.atol,
                            events=(guard_event, fell_event),
                            dense_output=True)
            if sol.status == -1:
                events.append({"t": t, "kind": "integration-breakdown"})
                outcome = OUTCOME_INFEASIBLE_CONFIG
                break
            t_stop = sol.t[-1]
            for ti in np.arange(t, t_stop, config.dt_sample):
                record(ti, sol.sol(ti))
            record(t_stop, sol.y[:, -1])
            if sol.t_events[1].size:                      # theta_dot hit zero
                events.append({"t": float(sol.t_events[1][0]),
                               "kind": OUTCOME_FELL_BACKWARD})
                outcome = OUTCOME_FELL_BACKWARD
                break
            if sol.t_events[0].size:                      # stride guard
                t = float(sol.t_events[0][0])
                xhat = sol.y_events[0][0].copy()
                xhat[0] = man.theta_max
                xhat = man_mod.manifold_reset(man, xhat)
                strides += 1
                events.append({"t": t, "kind": "reset"})
                record(t, xhat)
            else:                                         # stalled stride
                t = t_stop
                xhat = sol.y[:, -1]
                events.append({"t": t, "kind": "stall"})
                break
    except (man_mod.ManifoldError, dyn.GuardError) as exc:
        events.append({"t": t, "kind": OUTCOME_INFEASIBLE_CONFIG,
                       "detail": str(exc)})
        outcome = OUTCOME_INFEASIBLE_CONFIG

    return rec.build(events, outcome, strides,
                     {"model": "reduced", "n_strides": n_strides},
                     with_full=False)


# -- full-model simulation ------------------------------------------------


def simulate_hybrid(man, controller, x0: dyn.FullState, x_alpha0=(0.0, 0.0),
                    n_strides: int = 10,
                    config: SimConfig | None = None) -> SimTrace:
    """Full five-link closed-loop simulation with impact resets.

    The state is augmented with the pitch-shaping pair (alpha,
    alpha_dot), whose second derivative is the controller's applied
    pitch acceleration.  Guard crossings (swing-foot touchdown with the
    phase advancing) are bracketed by the integrator's event detection
    and root-refined far below the 1e-10 s contract before the plastic
    impact map is applied.  Every failure mode becomes an outcome tag;
    this function does not raise on physical failure.
    """
    config = config or SimConfig()
    model = man.model

    def rhs(t, z):
        x = dyn.FullState(z[:5], z[5:10])
        cmd = controller.command(t, x, (z[10], z[11]))
        tau = np.clip(cmd.torques, -model.u_max, model.u_max)
        xdot = dyn.swing_dynamics(model, x, tau)
        return np.concatenate([xdot, [z[11], cmd.u_apply]])

    def guard_event(t, z):
        # Touchdown only counts once the phase has advanced past the
        # midpoint; right after a reset the swing foot sits at height 0.
        h = dyn.swing_foot_position(model, z[:5])[1]
        if theta_of(z[:5]) < 0.5 * (man.theta_min + man.theta_max):
            return h + 1.0
        return h
    guard_event.terminal = True
    guard_event.direction = -1.0

    def fell_event(t, z):
        return THETA_GRAD @ z[5:10]
    fell_event.terminal = True
    fell_event.direction = -1.0

    rec = _Recorder()
    events = []
    outcome = OUTCOME_COMPLETED
    strides = 0
    t = 0.0
    z = np.concatenate([x0.q, x0.qdot,
                        np.asarray(x_alpha0, dtype=float)])
    horizon = n_strides * config.max_stride_time
    stride_start = 0.0

    def record(ti, zi) -> Command:
        x = dyn.FullState(zi[:5], zi[5:10])
        cmd = controller.command(ti, x, (zi[10], zi[11]))
        xh = (theta_of(zi[:5]), theta_dot_of(zi[:5], zi[5:10]),
              zi[10], zi[11])
        rec.add(ti, xh, cmd, full=zi[:10])
        return cmd

    def infeasible(ti, cmd: Command) -> bool:
        if cmd.feasible:
            return False
        events.append({"t": float(ti), "kind": OUTCOME_TORQUE_INFEASIBLE})
        return True

    try:
        if infeasible(t, record(t, z)):
            outcome = OUTCOME_TORQUE_INFEASIBLE
            n_strides = 0      # skip the loop; trace has the initial row
        while strides < n_strides and t < horizon:
            t_end = min(t + config.chunk, stride_start + config.max_stride_time,
                        horizon)
            sol = solve_ivp(rhs, (t, t_end), z, method="RK45",
                            rtol=config.rtol, atol=config.atol,
                            events=(guard_event, fell_event),
                            dense_output=True)
            if sol.status == -1 or not np.isfinite(sol.y[:, -1]).all():
                events.append({"t": t, "kind": "integration-breakdown"})
                outcome = OUTCOME_INFEASIBLE_CONFIG
                break
            t_stop = sol.t[-1]
            failed_sample = False
            for ti in np.arange(t + config.dt_sample, t_stop,
                                config.dt_sample):
                if infeasible(ti, record(ti, sol.sol(ti))):
                    outcome = OUTCOME_TORQUE_INFEASIBLE
                    failed_sample = True
                    break
            if failed_sample:
                break
            if sol.t_events[1].size:
                record(float(sol.t_events[1][0]), sol.y_events[1][0])
                events.append({"t": float(sol.t_events[1][0]),
                               "kind": OUTCOME_FELL_BACKWARD})
                outcome = OUTCOME_FELL_BACKWARD
                break
            if sol.t_events[0].size:
                t = float(sol.t_events[0][0])
                z = sol.y_events[0][0].copy()
                x_minus = dyn.FullState(z[:5], z[5:10])
                if infeasible(t, record(t, z)):
                    outcome = OUTCOME_TORQUE_INFEASIBLE
                    break
                reading = dyn.guard_evaluate(model, x_minus)
                if (abs(reading.height) > config.guard_tol
                        or reading.velocity >= 0.0):
                    events.append({"t": t, "kind": OUTCOME_INFEASIBLE_CONFIG,
                                   "detail": "guard localization failed"})
                    outcome = OUTCOME_INFEASIBLE_CONFIG
                    break
                x_plus = dyn.impact_map(model, x_minus,
                                        guard_tol=config.guard_tol)
                z = np.concatenate([x_plus.q, x_plus.qdot, z[10:]])
                strides += 1
                stride_start = t
                events.append({"t": t, "kind": "reset",
                               "height": reading.height})
                if not dyn.feasible(model, x_plus.q):
                    events.append({"t": t,
                                   "kind": OUTCOME_INFEASIBLE_CONFIG})
                    outcome = OUTCOME_INFEASIBLE_CONFIG
                    break
                if infeasible(t, record(t, z)):
                    outcome = OUTCOME_TORQUE_INFEASIBLE
                    break
            else:
                t = t_stop
                z = sol.y[:, -1].copy()
                if infeasible(t, record(t, z)):
                    outcome = OUTCOME_TORQUE_INFEASIBLE
                    break
                if not dyn.feasible(model, z[:5]):
                    events.append({"t": t,
                                   "kind": OUTCOME_INFEASIBLE_CONFIG})
                    outcome = OUTCOME_INFEASIBLE_CONFIG
                    break
                if t >= stride_start + config.max_stride_time:
                    events.append({"t": t, "kind": "stall"})
                    break
    except (man_mod.ManifoldError, dyn.GuardError, dyn.SingularImpactError,
            np.linalg.LinAlgError) as exc:
        events.append({"t": t, "kind": OUTCOME_INFEASIBLE_CONFIG,
                       "detail": str(exc)})
        outcome = OUTCOME_INFEASIBLE_CONFIG

    return rec.build(events, outcome, strides,
                     {"model": "full", "mode": getattr(controller, "mode", "?"),
                      "n_strides": n_strides},
                     with_full=True)


def tracking_experiment(man, reference: PitchReference, mode: str,
                        certificate=None, x0: dyn.FullState | None = None,
                        x_alpha0=(0.0, 0.0), n_strides: int = 10,
                        reg_config: RegulatorConfig | None = None,
                        sim_config: SimConfig | None = None) -> SimTrace:
    """Run the pitch-tracking pipeline in naive or safe mode."""
    if mode not in ("naive", "safe"):
        raise ValueError(f"mode must be 'naive' or 'safe', got {mode!r}")
    if mode == "safe" and certificate is None:
        raise ValueError("safe mode requires a certificate")
    if x0 is None:
        x0 = nominal_start(man)
    if mode == "naive":
        controller = NaiveController(man, reference, reg_config)
    else:
        controller = SafeController(man, reference, certificate, reg_config)
    t_wall = time.perf_counter()
    trace = simulate_hybrid(man, controller, x0, x_alpha0=x_alpha0,
                            n_strides=n_strides, config=sim_config)
    trace.metadata["wall_time_s"] = time.perf_counter() - t_wall
    trace.metadata["reference_knots"] = [
        [float(a), float(b)]
        for a, b in zip(reference.t_knots, reference.alpha_knots)]
    return trace
