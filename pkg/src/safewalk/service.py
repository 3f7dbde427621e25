"""Live steering session service.

One websocket connection drives one simulated robot.  The session loop
owns all simulation state; inbound commands land in a queue that is
drained exactly once per control step, so nothing mutates mid-step.
State snapshots stream to the client at a fixed rate.

Wire protocol (JSON, ``version`` mandatory, currently 1):

server -> client::

    {"version": 1, "type": "state", "t": ..., "xhat": [theta,
     theta_dot, alpha, alpha_dot], "q": [...5 joints], "q_manifold":
     [...nearest on-manifold joints], "v": ..., "w": ..., "u_desired":
     ..., "u_applied": ..., "torques": [...4], "u_min": ..., "u_max":
     ..., "alpha_target": ..., "regulator": true, "strides": n,
     "outcome": null | tag, "paused": false, "events": [...new since
     last message]}

    {"version": 1, "type": "error", "detail": "..."}

client -> server::

    {"version": 1, "type": "pitch", "alpha": 0.2}
    {"version": 1, "type": "regulator", "enabled": false}
    {"version": 1, "type": "pause"} / {"type": "resume"} / {"type": "reset"}

Commands are idempotent: repeating one is a no-op.
"""

from __future__ import annotations

import asyncio
import json
import time

import numpy as np
from fastapi import FastAPI, WebSocket, WebSocketDisconnect
from scipy.integrate import solve_ivp

from . import dynamics as dyn
from . import manifold as man_mod
from .gait import THETA_GRAD, theta_of, theta_dot_of
from .pipeline import PipelineConfig
from .regulator import (PitchReference, RegulatorConfig, affine_interval,
                        naive_pd, regulate, PieceTracker)
from .lpqp import solve_box_qp
from .simulate import (OUTCOME_FELL_BACKWARD, OUTCOME_INFEASIBLE_CONFIG,
                       OUTCOME_TORQUE_INFEASIBLE, SimConfig, nominal_start)
from .synthesis import ViabilityCertificate

SCHEMA_VERSION = 1

__all__ = ["SCHEMA_VERSION", "LiveSession", "create_app", "run_service"]


class LiveSession:
    """Steppable closed-loop simulation for interactive steering.

    The semantics match the batch simulator: same guard handling, same
    outcome taxonomy.  The pitch reference is the latest client command,
    held constant between commands.
    """

    def __init__(self, man, certificate: ViabilityCertificate | None,
                 reg_config: RegulatorConfig | None = None,
                 sim_config: SimConfig | None = None):
        self.man = man
        self.model = man.model
        self.certificate = certificate
        self.reg = reg_config or RegulatorConfig()
        self.sim = sim_config or SimConfig()
        self.reset()

    def reset(self):
        x0 = nominal_start(self.man)
        self.z = np.concatenate([x0.q, x0.qdot, [0.0, 0.0]])
        self.t = 0.0
        self.strides = 0
        self.outcome = None
        self.alpha_target = 0.0
        self.regulator_on = self.certificate is not None
        self.paused = False
        self.events = []
        self._stride_start = 0.0
        self._tracker = (PieceTracker(self.certificate, self.reg.hysteresis)
                         if self.certificate is not None else None)
        self._reference = PitchReference.constant(0.0)

    # -- commands (idempotent) -----------------------------------------

    def set_pitch(self, alpha: float):
        alpha = float(alpha)
        if alpha != self.alpha_target:
            self.alpha_target = alpha
            self._reference = PitchReference.constant(alpha)

    def set_regulator(self, enabled: bool):
        self.regulator_on = bool(enabled) and self.certificate is not None

    # -- control law ----------------------------------------------------

    def _command(self, t, z):
        x = dyn.FullState(z[:5], z[5:10])
        x_alpha = (z[10], z[11])
        u_d = naive_pd(x_alpha, t, self._reference, self.reg.kp, self.reg.kd)
        u0, u1 = man_mod.ustar_affine(self.man, x, x_alpha, strict=False)
        lo, hi = affine_interval(u0, u1, self.reg.torque_limit)
        feasible = lo <= hi
        if feasible:
            u_sat = float(solve_box_qp(np.array([u_d]), np.array([lo]),
                                       np.array([hi])).x[0])
        else:
            u_sat = 0.5 * (lo + hi)
        v = np.nan
        w = 0.0
        u_apply = u_sat
        if self.regulator_on:
            xhat = (theta_of(x.q), theta_dot_of(x.q, x.qdot),
                    float(z[10]), float(z[11]))
            u_apply, w, v = regulate(
                u_sat, xhat, self.certificate, self.reg,
                tracker=self._tracker,
                u_lo=lo if feasible else -np.inf,
                u_hi=hi if feasible else np.inf)
        tau = np.clip(u0 + u1 * u_apply, -self.model.u_max, self.model.u_max)
        return {"u_desired": u_d, "u_saturated": u_sat, "u_applied": u_apply,
                "torques": tau, "v": v, "w": w, "feasible": feasible,
                "u_min": lo, "u_max": hi}

    # -- stepping ---------------------------------------------------------

    def step(self, dt: float):
        """Advance simulation time by ``dt`` (handling at most a few
        guard crossings), unless paused or already failed."""
        if self.paused or self.outcome is not None:
            return

        def rhs(t, z):
            cmd = self._command(t, z)
            x = dyn.FullState(z[:5], z[5:10])
            xdot = dyn.swing_dynamics(self.model, x, cmd["torques"])
            return np.concatenate([xdot, [z[11], cmd["u_applied"]]])

        def guard_event(t, z):
            h = dyn.swing_foot_position(self.model, z[:5])[1]
            mid = 0.5 * (self.man.theta_min + self.man.theta_max)
            return h + 1.0 if theta_of(z[:5]) < mid else h
        guard_event.terminal = True
        guard_event.direction = -1.0

        def fell_event(t, z):
            return THETA_GRAD @ z[5:10]
        fell_event.terminal = True
        fell_event.direction = -1.0

        t_end = self.t + dt
        try:
            for _ in range(8):      # bounded resets per step
                if self.t >= t_end:
                    break
                sol = solve_ivp(rhs, (self.t, t_end), self.z, method="RK45",
                                rtol=self.sim.rtol, atol=self.sim.atol,
                                events=(guard_event, fell_event))
                if sol.status == -1 or not np.isfinite(sol.y[:, -1]).all():
                    self._fail(OUTCOME_INFEASIBLE_CONFIG,
                               "integration breakdown")
                    return
                self.t = float(sol.t[-1])
                self.z = sol.y[:, -1].copy()
                if sol.t_events[1].size:
                    self._fail(OUTCOME_FELL_BACKWARD)
                    return
                if sol.t_events[0].size:
                    self.t = float(sol.t_events[0][0])
                    self.z = sol.y_events[0][0].copy()
                    if not self._impact():
                        return
                elif self.t - self._stride_start > self.sim.max_stride_time:
                    self._fail(OUTCOME_INFEASIBLE_CONFIG, "stride stalled")
                    return
            cmd = self._command(self.t, self.z)
            if not cmd["feasible"]:
                self._fail(OUTCOME_TORQUE_INFEASIBLE)
        except (man_mod.ManifoldError, dyn.GuardError,
                dyn.SingularImpactError, np.linalg.LinAlgError) as exc:
            self._fail(OUTCOME_INFEASIBLE_CONFIG, str(exc))

    def _impact(self) -> bool:
        x_minus = dyn.FullState(self.z[:5], self.z[5:10])
        reading = dyn.guard_evaluate(self.model, x_minus)
        if abs(reading.height) > self.sim.guard_tol or reading.velocity >= 0:
            self._fail(OUTCOME_INFEASIBLE_CONFIG, "guard localization failed")
            return False
        x_plus = dyn.impact_map(self.model, x_minus,
                                guard_tol=self.sim.guard_tol)
        if not dyn.feasible(self.model, x_plus.q):
            self._fail(OUTCOME_INFEASIBLE_CONFIG, "post-impact infeasible")
            return False
        self.z = np.concatenate([x_plus.q, x_plus.qdot, self.z[10:]])
        self.strides += 1
        self._stride_start = self.t
        self.events.append({"t": self.t, "kind": "reset"})
        return True

    def _fail(self, outcome, detail=None):
        self.outcome = outcome
        event = {"t": self.t, "kind": outcome}
        if detail:
            event["detail"] = detail
        self.events.append(event)

    # -- telemetry -------------------------------------------------------

    def snapshot(self, new_events) -> dict:
        cmd = self._command(self.t, self.z)
        xhat = [theta_of(self.z[:5]),
                theta_dot_of(self.z[:5], self.z[5:10]),
                float(self.z[10]), float(self.z[11])]
        try:
            ghost = man_mod.lift(
                self.man,
                (float(np.clip(xhat[0], self.man.theta_min,
                               self.man.theta_max)),
                 xhat[1], xhat[2], xhat[3]), strict=False).q
        except man_mod.ManifoldError:
            ghost = self.z[:5]
        return {
            "version": SCHEMA_VERSION, "type": "state",
            "t": self.t, "xhat": xhat,
            "q": self.z[:5].tolist(), "qdot": self.z[5:10].tolist(),
            "q_manifold": np.asarray(ghost, dtype=float).tolist(),
            "v": None if np.isnan(cmd["v"]) else float(cmd["v"]),
            "w": float(cmd["w"]),
            "u_desired": float(cmd["u_desired"]),
            "u_applied": float(cmd["u_applied"]),
            "u_min": float(cmd["u_min"]), "u_max": float(cmd["u_max"]),
            "torques": [float(x) for x in cmd["torques"]],
            "alpha_target": self.alpha_target,
            "regulator": self.regulator_on,
            "epsilon": self.reg.epsilon,
            "strides": self.strides,
            "outcome": self.outcome,
            "paused": self.paused,
            "events": new_events,
        }


def _error_frame(detail: str) -> dict:
    return {"version": SCHEMA_VERSION, "type": "error", "detail": detail}


def apply_command(session: LiveSession, msg: dict) -> str | None:
    """Validate and apply one client command; returns an error string
    for malformed messages."""
    if not isinstance(msg, dict):
        return "message must be a JSON object"
    if msg.get("version") != SCHEMA_VERSION:
        return f"unsupported schema version {msg.get('version')!r}"
    kind = msg.get("type")
    if kind == "pitch":
        if not isinstance(msg.get("alpha"), (int, float)):
            return "pitch command needs a numeric 'alpha'"
        session.set_pitch(msg["alpha"])
    elif kind == "regulator":
        if not isinstance(msg.get("enabled"), bool):
            return "regulator command needs a boolean 'enabled'"
        session.set_regulator(msg["enabled"])
    elif kind == "pause":
        session.paused = True
    elif kind == "resume":
        session.paused = False
    elif kind == "reset":
        session.reset()
    else:
        return f"unknown command type {kind!r}"
    return None


def create_app(config: PipelineConfig, manifold=None,
               certificate=None):
    """FastAPI app with the single websocket session endpoint."""
    if manifold is None:
        from .pipeline import Pipeline
        manifold = Pipeline(config).manifold()
    if certificate is None:
        import os
        if os.path.exists(config.certificate_path):
            certificate = ViabilityCertificate.load(config.certificate_path)

    app = FastAPI(title="walking-safety session service")
    app.state.config = config
    app.state.manifold = manifold
    app.state.certificate = certificate

    @app.get("/healthz")
    def healthz():
        return {"ok": True, "certificate": certificate is not None}

    @app.websocket("/session")
    async def session_socket(ws: WebSocket):
        await ws.accept()
        session = LiveSession(manifold, certificate,
                              reg_config=config.regulator_config())
        dt = 1.0 / config.rate_hz * config.real_time_factor
        queue: asyncio.Queue = asyncio.Queue()
        closed = asyncio.Event()

        async def reader():
            try:
                while True:
                    raw = await ws.receive_text()
                    try:
                        msg = json.loads(raw)
                    except json.JSONDecodeError:
                        msg = {"malformed": raw}
                    await queue.put(msg)
            except WebSocketDisconnect:
                closed.set()
            except RuntimeError:
                closed.set()

        reader_task = asyncio.create_task(reader())
        loop = asyncio.get_running_loop()
        next_tick = loop.time()
        try:
            while not closed.is_set():
                # drain the command queue once per control step
                errors = []
                while not queue.empty():
                    msg = queue.get_nowait()
                    if "malformed" in msg:
                        errors.append("malformed JSON")
                        continue
                    err = apply_command(session, msg)
                    if err:
                        errors.append(err)
                for err in errors:
                    await ws.send_text(json.dumps(_error_frame(err)))
                n_before = len(session.events)
                await loop.run_in_executor(None, session.step, dt)
                await ws.send_text(json.dumps(
                    session.snapshot(session.events[n_before:])))
                next_tick += 1.0 / config.rate_hz
                delay = next_tick - loop.time()
                if delay > 0:
                    await asyncio.sleep(delay)
                else:
                    next_tick = loop.time()
        except (WebSocketDisconnect, RuntimeError):
            pass
        finally:
            reader_task.cancel()

    return app


def run_service(config: PipelineConfig):
    import uvicorn
    uvicorn.run(create_app(config), host=config.host, port=config.port,
                log_level="info")
