import json

import numpy as np
import pytest
from fastapi.testclient import TestClient

from safewalk import gait as G
from safewalk import manifold as MF
from safewalk.pipeline import PipelineConfig
from safewalk.polynomial import Polynomial
from safewalk.regulator import RegulatorConfig
from safewalk.service import (SCHEMA_VERSION, LiveSession, apply_command,
                              create_app)
from safewalk.synthesis import SynthesisConfig, VARS, ViabilityCertificate


@pytest.fixture(scope="module")
def man(model):
    gait = G.ingest(*G.generate_spline_gait(model), model)
    return MF.build_manifold(model, gait)


@pytest.fixture(scope="module")
def cert(man):
    """Everywhere-positive barrier: the regulator never activates, so
    the service plumbing can be exercised without a synthesized
    certificate."""
    box = {"theta": (man.theta_min, man.theta_max),
           "theta_dot": (-0.3, 1.6), "alpha": (-0.35, 0.35),
           "alpha_dot": (-1.5, 1.5)}
    one = Polynomial(VARS, {(0, 0, 0, 0): 1.0})
    return ViabilityCertificate(
        theta_edges=np.array([box["theta"][0], box["theta"][1]]),
        boxes=[dict(box)], v_unit=[one], u_unit=[0.0 * one],
        lam_unit=[one], q_unit=[{}], box=dict(box),
        config=SynthesisConfig(n_pieces=1))


@pytest.fixture(scope="module")
def client(man, cert, tmp_path_factory):
    config = PipelineConfig(out_dir=str(tmp_path_factory.mktemp("svc")),
                            rate_hz=200.0, real_time_factor=0.2)
    app = create_app(config, manifold=man, certificate=cert)
    with TestClient(app) as tc:
        yield tc


def recv_state(ws):
    """Next state frame, skipping error frames."""
    for _ in range(10):
        msg = json.loads(ws.receive_text())
        if msg["type"] == "state":
            return msg
    raise AssertionError("no state frame within 10 messages")


def recv_error(ws):
    for _ in range(10):
        msg = json.loads(ws.receive_text())
        if msg["type"] == "error":
            return msg
    raise AssertionError("no error frame within 10 messages")


# -- LiveSession unit level --------------------------------------------------


def test_session_step_advances(man, cert):
    s = LiveSession(man, cert)
    snap0 = s.snapshot([])
    s.step(0.01)
    snap1 = s.snapshot([])
    assert snap1["t"] == pytest.approx(0.01, abs=1e-12)
    assert snap1["t"] > snap0["t"]
    assert snap1["outcome"] is None
    assert len(snap1["q"]) == 5 and len(snap1["torques"]) == 4
    assert snap1["u_min"] < snap1["u_max"]
    assert max(abs(t) for t in snap1["torques"]) <= 30.0 + 1e-9


def test_session_passthrough_with_interior_barrier(man, cert):
    # v = 1 everywhere: regulated command equals the saturated command
    s = LiveSession(man, cert)
    for _ in range(5):
        s.step(0.01)
        cmd = s._command(s.t, s.z)
        assert cmd["u_applied"] == pytest.approx(cmd["u_saturated"])
        assert cmd["w"] == 0.0


def test_session_commands_idempotent(man, cert):
    s = LiveSession(man, cert)
    assert apply_command(s, {"version": 1, "type": "pitch",
                             "alpha": 0.1}) is None
    ref = s._reference
    assert apply_command(s, {"version": 1, "type": "pitch",
                             "alpha": 0.1}) is None
    assert s._reference is ref          # repeated command is a no-op
    assert s.alpha_target == 0.1
    apply_command(s, {"version": 1, "type": "regulator", "enabled": False})
    assert not s.regulator_on
    apply_command(s, {"version": 1, "type": "pause"})
    t = s.t
    s.step(0.01)
    assert s.t == t
    apply_command(s, {"version": 1, "type": "resume"})
    s.step(0.01)
    assert s.t > t
    apply_command(s, {"version": 1, "type": "reset"})
    assert s.t == 0.0 and s.alpha_target == 0.0 and s.regulator_on


def test_session_rejects_bad_commands(man, cert):
    s = LiveSession(man, cert)
    assert "schema version" in apply_command(s, {"version": 99,
                                                 "type": "pitch"})
    assert "unknown command" in apply_command(s, {"version": 1,
                                                  "type": "dance"})
    assert "numeric" in apply_command(s, {"version": 1, "type": "pitch",
                                          "alpha": "fast"})
    assert "boolean" in apply_command(s, {"version": 1, "type": "regulator",
                                          "enabled": 1})
    assert apply_command(s, "pitch") == "message must be a JSON object"


def test_session_fell_backward_outcome(man, cert):
    s = LiveSession(man, cert)
    s.set_regulator(False)
    # start from a crawl: the stride dies within the first second
    x0 = MF.lift(man, (man.theta_min, 0.3, 0.0, 0.0))
    s.z = np.concatenate([x0.q, x0.qdot, [0.0, 0.0]])
    for _ in range(300):
        s.step(0.01)
        if s.outcome is not None:
            break
    assert s.outcome == "fell-backward"
    t = s.t
    s.step(0.01)
    assert s.t == t                     # failed sessions stay frozen


# -- websocket endpoint --------------------------------------------------


def test_healthz(client):
    res = client.get("/healthz")
    assert res.status_code == 200
    assert res.json() == {"ok": True, "certificate": True}


def test_stream_schema_and_progress(client):
    with client.websocket_connect("/session") as ws:
        frames = [recv_state(ws) for _ in range(4)]
    for f in frames:
        assert f["version"] == SCHEMA_VERSION
        assert f["regulator"] is True
        assert f["outcome"] is None
        assert len(f["xhat"]) == 4
    times = [f["t"] for f in frames]
    assert times == sorted(times)
    assert times[-1] > times[0]


def test_pitch_command_applied(client):
    with client.websocket_connect("/session") as ws:
        recv_state(ws)
        ws.send_text(json.dumps({"version": 1, "type": "pitch",
                                 "alpha": 0.2}))
        for _ in range(5):
            f = recv_state(ws)
            if f["alpha_target"] == 0.2:
                break
        assert f["alpha_target"] == 0.2


def test_malformed_messages_get_error_frames(client):
    with client.websocket_connect("/session") as ws:
        ws.send_text("this is not json")
        err = recv_error(ws)
        assert "malformed" in err["detail"]
        ws.send_text(json.dumps({"version": 2, "type": "pitch",
                                 "alpha": 0.0}))
        err = recv_error(ws)
        assert "schema version" in err["detail"]


def test_pause_resume_reset(client):
    with client.websocket_connect("/session") as ws:
        recv_state(ws)
        ws.send_text(json.dumps({"version": 1, "type": "pause"}))
        # wait until the pause is acknowledged
        for _ in range(5):
            f = recv_state(ws)
            if f["paused"]:
                break
        assert f["paused"]
        t_frozen = f["t"]
        for _ in range(3):
            f = recv_state(ws)
        assert f["t"] == t_frozen
        ws.send_text(json.dumps({"version": 1, "type": "resume"}))
        for _ in range(5):
            f = recv_state(ws)
            if not f["paused"] and f["t"] > t_frozen:
                break
        assert f["t"] > t_frozen
        ws.send_text(json.dumps({"version": 1, "type": "reset"}))
        for _ in range(5):
            f = recv_state(ws)
            if f["t"] < t_frozen:
                break
        assert f["t"] < t_frozen


def test_regulator_toggle_echo(client):
    with client.websocket_connect("/session") as ws:
        recv_state(ws)
        ws.send_text(json.dumps({"version": 1, "type": "regulator",
                                 "enabled": False}))
        for _ in range(5):
            f = recv_state(ws)
            if f["regulator"] is False:
                break
        assert f["regulator"] is False
