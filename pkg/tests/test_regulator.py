import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.integrate import solve_ivp
from scipy.optimize import brentq

from safewalk import gait as G
from safewalk import manifold as MF
from safewalk.polynomial import Polynomial
from safewalk.regulator import (PieceTracker, PitchReference, RegulatorConfig,
                                affine_interval, naive_pd, qp_saturate,
                                regulate, smooth_step, torque_interval)
from safewalk.synthesis import VARS, SynthesisConfig, ViabilityCertificate


@pytest.fixture(scope="module")
def man(model):
    gait = G.ingest(*G.generate_spline_gait(model), model)
    return MF.build_manifold(model, gait)


# -- smooth_step -----------------------------------------------------------


def test_smooth_step_plateaus():
    for eps in (0.05, 0.1, 0.5):
        assert smooth_step(eps, eps) == 0.0
        assert smooth_step(0.5 * eps, eps) == 1.0
        assert smooth_step(10.0, eps) == 0.0
        assert smooth_step(-3.0, eps) == 1.0


def test_smooth_step_midpoint():
    assert smooth_step(0.075, 0.1) == pytest.approx(0.5, abs=1e-12)


def test_smooth_step_c1_at_edges():
    eps = 0.1
    for edge in (eps, 0.5 * eps):
        # derivative vanishes at the plateau edges: the one-sided secant
        # slope must shrink linearly with the step
        for d in (1e-5, 1e-6, 1e-7):
            slope = (smooth_step(edge + d, eps)
                     - smooth_step(edge - d, eps)) / (2 * d)
            assert abs(slope) < 1200.0 * d
            jump = abs(smooth_step(edge + d, eps) - smooth_step(edge - d, eps))
            assert jump < 2400.0 * d * d + 1e-12


@settings(deadline=None)
@given(st.floats(-2.0, 2.0), st.floats(0.01, 0.99))
def test_smooth_step_range_and_monotone(v, eps):
    w = smooth_step(v, eps)
    assert 0.0 <= w <= 1.0
    assert smooth_step(v + 1e-3, eps) <= w + 1e-12


def test_smooth_step_rejects_bad_eps():
    with pytest.raises(ValueError):
        smooth_step(0.5, 1.5)


# -- PitchReference --------------------------------------------------------


def test_constant_reference():
    ref = PitchReference.constant(0.2)
    for t in (0.0, 1.3, 50.0):
        assert ref.alpha(t) == pytest.approx(0.2)
        assert ref.alpha_dot(t) == pytest.approx(0.0, abs=1e-12)
        assert ref.alpha_ddot(t) == pytest.approx(0.0, abs=1e-12)


def test_ramp_reference_endpoints():
    ref = PitchReference.ramp(0.3, rise_time=2.0)
    assert ref.alpha(0.0) == pytest.approx(0.0, abs=1e-12)
    assert ref.alpha(2.0) == pytest.approx(0.3, rel=1e-9)
    assert ref.alpha(100.0) == pytest.approx(0.3, rel=1e-9)


def test_reference_save_load_roundtrip(tmp_path):
    ref = PitchReference(np.array([0.0, 0.4, 1.0, 2.5]),
                         np.array([0.0, 0.1, -0.05, 0.2]))
    path = tmp_path / "ref.txt"
    ref.save(path)
    back = PitchReference.load(path)
    for t in np.linspace(0.0, 2.5, 17):
        assert back.alpha(t) == pytest.approx(ref.alpha(t), abs=1e-14)


def test_reference_rejects_bad_knots():
    with pytest.raises(ValueError):
        PitchReference(np.array([0.0, 0.0]), np.array([1.0, 2.0]))
    with pytest.raises(ValueError):
        PitchReference(np.array([0.0]), np.array([1.0]))


# -- naive_pd ---------------------------------------------------------------


def test_naive_pd_on_reference_returns_feedforward():
    ref = PitchReference(np.array([0.0, 1.0, 2.0]), np.array([0.0, 0.3, 0.1]))
    t = 0.7
    out = naive_pd((ref.alpha(t), ref.alpha_dot(t)), t, ref)
    assert out == pytest.approx(ref.alpha_ddot(t), abs=1e-12)


def test_naive_pd_proportional_term():
    ref = PitchReference.constant(0.25)
    out = naive_pd((0.15, 0.0), 1.0, ref, kp=25.0, kd=10.0)
    assert out == pytest.approx(25.0 * 0.1, rel=1e-9)


def test_naive_pd_matches_analytic_double_integrator():
    """kp=25, kd=10 is critically damped: the unit step response of the
    double integrator under the PD law has a closed form."""
    ref = PitchReference.constant(1.0)

    def rhs(t, y):
        return [y[1], naive_pd(y, t, ref)]

    sol = solve_ivp(rhs, (0.0, 2.0), [0.0, 0.0], rtol=1e-10, atol=1e-12,
                    dense_output=True)
    omega = 5.0
    for t in np.linspace(0.1, 2.0, 16):
        exact = 1.0 - (1.0 + omega * t) * np.exp(-omega * t)
        assert sol.sol(t)[0] == pytest.approx(exact, abs=1e-6)


# -- affine interval / qp_saturate ------------------------------------------


@settings(deadline=None, max_examples=50)
@given(st.integers(0, 2**31 - 1))
def test_affine_interval_matches_brute_force(seed):
    rng = np.random.default_rng(seed)
    u0 = rng.uniform(-40, 40, 4)
    u1 = rng.uniform(-3, 3, 4)
    lo, hi = affine_interval(u0, u1, 30.0)
    grid = np.linspace(-200, 200, 4001)
    ok = np.all(np.abs(u0[None, :] + np.outer(grid, u1)) <= 30.0 + 1e-9,
                axis=1)
    if lo > hi:
        assert not ok.any()
    else:
        inside = (grid >= lo - 1e-6) & (grid <= hi + 1e-6)
        assert not (ok & ~inside).any()
        strict = (grid >= lo + 0.2) & (grid <= hi - 0.2)
        assert np.all(ok[strict])


def test_qp_saturate_passthrough_and_projection(man):
    x = MF.lift(man, (0.0, 0.7, 0.0, 0.0))
    lo, hi = torque_interval(man, x, (0.0, 0.0))
    assert lo < hi
    mid = 0.5 * (lo + hi)
    res = qp_saturate(man, x, (0.0, 0.0), mid)
    assert res.feasible and res.u == pytest.approx(mid, abs=1e-12)
    res = qp_saturate(man, x, (0.0, 0.0), hi + 5.0)
    assert res.feasible and res.u == pytest.approx(hi, abs=1e-12)
    res = qp_saturate(man, x, (0.0, 0.0), lo - 5.0)
    assert res.feasible and res.u == pytest.approx(lo, abs=1e-12)


def test_qp_saturate_reports_empty_interval(man):
    # fast touchdown states have an empty torque window
    x = MF.lift(man, (0.1499, 1.3, 0.0, 0.0))
    res = qp_saturate(man, x, (0.0, 0.0), 0.0)
    assert not res.feasible and res.u is None


def test_qp_saturate_matches_bisection_oracle(man, rng):
    """Saturated inputs on the torque boundary agree with a root of
    max_i |tau_i(u)| - 30 located by bisection."""
    checked = 0
    for _ in range(1000):
        xhat = (rng.uniform(-0.14, 0.14), rng.uniform(0.3, 0.85),
                rng.uniform(-0.25, 0.25), rng.uniform(-0.8, 0.8))
        try:
            x = MF.lift(man, xhat)
        except MF.ManifoldError:
            continue
        x_alpha = xhat[2:]
        lo, hi = torque_interval(man, x, x_alpha)
        if lo > hi or not np.isfinite([lo, hi]).all():
            continue
        u_d = hi + rng.uniform(0.5, 20.0)   # force projection onto hi
        res = qp_saturate(man, x, x_alpha, u_d)
        assert res.feasible

        u0, u1 = MF.ustar_affine(man, x, x_alpha, strict=False)

        def excess(u):
            return np.max(np.abs(u0 + u1 * u)) - 30.0

        root = brentq(excess, 0.5 * (lo + hi), u_d, xtol=1e-12)
        assert res.u == pytest.approx(root, abs=1e-6)
        checked += 1
    assert checked > 200


# -- regulate ----------------------------------------------------------------


@pytest.fixture(scope="module")
def toy_cert():
    """Two-piece certificate with known barrier and controller values."""
    box = {"theta": (0.0, 1.0), "theta_dot": (-1.0, 1.0),
           "alpha": (-1.0, 1.0), "alpha_dot": (-1.0, 1.0)}
    boxes = [dict(box, theta=(0.0, 0.5)), dict(box, theta=(0.5, 1.0))]
    one = Polynomial(VARS, {(0, 0, 0, 0): 1.0})
    # v = theta (unit coordinate of the piece), u = 2 on piece 0, -1 on 1
    v = Polynomial(VARS, {(1, 0, 0, 0): 1.0})
    return ViabilityCertificate(
        theta_edges=np.array([0.0, 0.5, 1.0]), boxes=boxes,
        v_unit=[v, v], u_unit=[2.0 * one, -1.0 * one],
        lam_unit=[one, one], q_unit=[{}, {}], box=box,
        config=SynthesisConfig(n_pieces=2))


def test_regulate_deep_interior_passthrough(toy_cert):
    cfg = RegulatorConfig(epsilon=0.1)
    # theta = 0.45 -> piece 0 unit coordinate 0.8 -> v = 0.8 >= eps
    u_r, w, v = regulate(0.7, (0.45, 0.0, 0.0, 0.0), toy_cert, cfg)
    assert (u_r, w) == (0.7, 0.0)
    assert v == pytest.approx(0.8)


def test_regulate_full_override_at_boundary(toy_cert):
    cfg = RegulatorConfig(epsilon=0.1)
    # theta = 0.25 -> unit coordinate 0 -> v = 0 <= eps/2 -> u_s = 2
    u_r, w, v = regulate(-5.0, (0.25, 0.0, 0.0, 0.0), toy_cert, cfg)
    assert w == 1.0 and u_r == pytest.approx(2.0)


def test_regulate_fixed_point_and_blend(toy_cert):
    cfg = RegulatorConfig(epsilon=0.5)
    # v = 0.375 lies mid-band; u0 equal to u_s passes through unchanged
    xhat = (0.25 + 0.375 * 0.25, 0.0, 0.0, 0.0)
    u_r, w, v = regulate(2.0, xhat, toy_cert, cfg)
    assert 0.0 < w < 1.0
    assert u_r == pytest.approx(2.0, abs=1e-12)
    u_r2, _, _ = regulate(0.0, xhat, toy_cert, cfg)
    assert u_r2 == pytest.approx(2.0 * w, abs=1e-12)


def test_regulate_clamps_to_interval(toy_cert):
    cfg = RegulatorConfig(epsilon=0.1)
    u_r, _, _ = regulate(-5.0, (0.25, 0.0, 0.0, 0.0), toy_cert, cfg,
                         u_lo=-1.0, u_hi=1.0)
    assert u_r == 1.0   # u_s = 2 clamped to the feasible interval


def test_piece_tracker_hysteresis(toy_cert):
    tracker = PieceTracker(toy_cert, hysteresis=1e-6)
    assert tracker.select(0.25) == 0
    # tiny overshoot past the boundary keeps the current piece
    assert tracker.select(0.5 + 5e-7) == 0
    # a real crossing switches
    assert tracker.select(0.51) == 1
    # and tiny undershoot now stays on piece 1
    assert tracker.select(0.5 - 5e-7) == 1


def test_regulator_config_validation():
    with pytest.raises(ValueError):
        RegulatorConfig(epsilon=0.0)
    with pytest.raises(ValueError):
        RegulatorConfig(epsilon=1.0)
    with pytest.raises(ValueError):
        RegulatorConfig(torque_limit=-1.0)
