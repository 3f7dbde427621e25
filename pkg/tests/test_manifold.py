import numpy as np
import pytest
from scipy.integrate import solve_ivp

from safewalk import dynamics as dyn
from safewalk import gait as G
from safewalk import manifold as MF


@pytest.fixture(scope="module")
def gait(model):
    return G.ingest(*G.generate_spline_gait(model), model)


@pytest.fixture(scope="module")
def man(model, gait):
    return MF.build_manifold(model, gait)


def closed_loop_rhs(man, u_alpha_fn):
    """Full-model flow under the linearizing torque, state (q, qd, a, ad)."""
    model = man.model

    def rhs(t, y):
        q, qdot, alpha, alpha_dot = y[:5], y[5:10], y[10], y[11]
        u_alpha = u_alpha_fn(t)
        u = MF.ustar(man, dyn.FullState(q, qdot), (alpha, alpha_dot), u_alpha,
                     strict=False)
        # solve the dynamics directly; torque-box checks are not under test
        M = dyn.mass_matrix(model, q)
        qddot = np.linalg.solve(M, dyn.B_INPUT @ u
                                - dyn.bias_and_gravity(model, q, qdot))
        return np.concatenate([qdot, qddot, [alpha_dot, u_alpha]])

    return rhs


def roll_full(man, xhat0, u_alpha_fn, t_end, rtol=1e-10):
    st = MF.lift(man, xhat0)
    y0 = np.concatenate([st.q, st.qdot, xhat0[2:]])
    guard = lambda t, y: G.theta_of(y[:5]) - man.theta_max
    guard.terminal = True
    guard.direction = 1
    sol = solve_ivp(closed_loop_rhs(man, u_alpha_fn), (0.0, t_end), y0,
                    rtol=rtol, atol=1e-12, dense_output=True, events=guard,
                    max_step=0.01)
    return sol


def roll_reduced(man, xhat0, u_alpha_fn, t_end, rtol=1e-10):
    def rhs(t, y):
        f, g = MF.manifold_dynamics(man, y, strict=False)
        return f + g * u_alpha_fn(t)

    guard = lambda t, y: y[0] - man.theta_max
    guard.terminal = True
    guard.direction = 1
    return solve_ivp(rhs, (0.0, t_end), np.asarray(xhat0, dtype=float),
                     rtol=rtol, atol=1e-12, dense_output=True, events=guard,
                     max_step=0.01)


def test_theta_formula():
    assert G.theta_of([0.1, 0.2, 0.3, 0.7, -0.4]) == pytest.approx(-0.45)
    assert G.theta_of(np.zeros(5)) == 0.0


def test_hm_vanishes_at_phase_endpoints(man):
    for alpha in np.linspace(-0.3, 0.3, 9):
        np.testing.assert_allclose(man.hm(man.theta_min, alpha), 0.0, atol=1e-12)
        np.testing.assert_allclose(man.hm(man.theta_max, alpha), 0.0, atol=1e-12)


def test_alpha_shifts_torso_and_swing_hip_rows(man, rng):
    for _ in range(10):
        xhat = np.array([rng.uniform(man.theta_min, man.theta_max), 1.0, 0.0, 0.0])
        q = MF.lift(man, xhat).q
        alpha = rng.uniform(-0.3, 0.3)
        theta = G.theta_of(q)
        shift = (man.h(q, alpha) - man.h(q, 0.0)
                 - (man.hm(theta, alpha) - man.hm(theta, 0.0)))
        np.testing.assert_allclose(shift, [-alpha, 0.0, alpha, 0.0], atol=1e-12)


def test_on_gait_output_is_correction_only(man, gait):
    for t in np.linspace(0.0, gait.t_max, 20):
        q = gait.q(t)
        np.testing.assert_allclose(
            man.h(q, 0.0), man.hm(gait.theta(t), 0.0), atol=1e-9)


def test_lift_round_trip(man, rng):
    for _ in range(30):
        xhat = np.array([
            rng.uniform(man.theta_min, man.theta_max),
            rng.uniform(0.2, 2.5),
            rng.uniform(-0.3, 0.3),
            rng.uniform(-1.0, 1.0),
        ])
        st = MF.lift(man, xhat)
        assert abs(G.theta_of(st.q) - xhat[0]) < 1e-12
        assert abs(G.theta_dot_of(st.q, st.qdot) - xhat[1]) < 1e-12
        assert np.max(np.abs(man.h(st.q, xhat[2]))) < 1e-10
        assert np.max(np.abs(man.h_dot(st.q, st.qdot, xhat[2], xhat[3]))) < 1e-10


def test_lift_matches_gait_at_zero_alpha(man, gait):
    theta = 0.5 * (gait.theta_min + gait.theta_max)
    q = MF.lift(man, np.array([theta, 1.0, 0.0, 0.0])).q
    expected = gait.tracked_rows(theta) - man.hm(theta, 0.0)
    np.testing.assert_allclose(q[G.OUTPUT_ROWS], expected, atol=1e-10)


def test_lift_jacobian_matches_finite_differences(man):
    base = np.array([0.01, 1.0, 0.08, 0.2])
    eps = 1e-6
    for idx in (0, 2):  # theta and alpha directions
        hi, lo = base.copy(), base.copy()
        hi[idx] += eps
        lo[idx] -= eps
        fd = (MF.lift(man, hi).q - MF.lift(man, lo).q) / (2 * eps)
        eps2 = 2e-6
        hi2, lo2 = base.copy(), base.copy()
        hi2[idx] += eps2
        lo2[idx] -= eps2
        fd2 = (MF.lift(man, hi2).q - MF.lift(man, lo2).q) / (2 * eps2)
        # Richardson check: both step sizes agree, so fd is trustworthy
        np.testing.assert_allclose(fd, fd2, atol=1e-5)


def test_phase_out_of_range_rejected(man):
    with pytest.raises(MF.ManifoldError):
        MF.lift(man, np.array([man.theta_max + 0.1, 1.0, 0.0, 0.0]))


def test_ustar_affine_in_shaping_input(man, rng):
    for _ in range(10):
        xhat = np.array([rng.uniform(man.theta_min, man.theta_max),
                         rng.uniform(0.3, 2.0),
                         rng.uniform(-0.3, 0.3),
                         rng.uniform(-1.0, 1.0)])
        st = MF.lift(man, xhat)
        u0, u1 = MF.ustar_affine(man, st, tuple(xhat[2:]))
        for ua in (-11.0, 0.0, 3.0, 17.0):
            u = MF.ustar(man, st, tuple(xhat[2:]), ua)
            np.testing.assert_allclose(u, u0 + u1 * ua, atol=1e-12)


def test_closed_loop_stays_on_manifold(man):
    xhat0 = np.array([man.theta_min + 0.02, 1.0, 0.05, 0.0])
    u_alpha = lambda t: 2.0 * np.sin(9.0 * t)
    sol = roll_full(man, xhat0, u_alpha, 0.2, rtol=3e-12)
    worst = 0.0
    for t in np.linspace(0, sol.t[-1], 100):
        y = sol.sol(t)
        worst = max(worst, np.max(np.abs(man.h(y[:5], y[10], strict=False))))
    assert worst < 1e-7


def test_off_manifold_error_decays(man, model):
    xhat0 = np.array([man.theta_min + 0.02, 1.0, 0.0, 0.0])
    st = MF.lift(man, xhat0)
    q = st.q + np.array([0.02, -0.01, 0.015, -0.02, 0.01])
    y0 = np.concatenate([q, st.qdot, xhat0[2:]])
    sol = solve_ivp(closed_loop_rhs(man, lambda t: 0.0), (0.0, 0.25), y0,
                    rtol=1e-9, atol=1e-11, dense_output=True)
    ts = np.linspace(0, sol.t[-1], 60)
    errs = [np.max(np.abs(man.h(sol.sol(t)[:5], sol.sol(t)[10], strict=False)))
            for t in ts]
    # critically damped outer loop: one transient peak, then decay
    peak = int(np.argmax(errs))
    assert peak < len(errs) // 2
    tail = errs[peak:]
    assert all(b <= a * 1.01 for a, b in zip(tail, tail[1:]))
    assert errs[-1] < 0.7 * errs[peak]


def test_reduced_dynamics_structure(man, rng):
    for _ in range(10):
        xhat = np.array([rng.uniform(man.theta_min, man.theta_max),
                         rng.uniform(0.3, 2.0),
                         rng.uniform(-0.3, 0.3),
                         rng.uniform(-1.0, 1.0)])
        f, g = MF.manifold_dynamics(man, xhat)
        assert f[0] == xhat[1] and f[2] == xhat[3]
        assert f[3] == 0.0 and g[0] == 0.0 and g[2] == 0.0 and g[3] == 1.0
        assert abs(g[1]) > 1e-6  # shaping input couples into the pivot


def test_reduction_consistency_over_stride(man):
    # manifold rollout vs projected full-model rollout, same shaping input
    xhat0 = np.array([man.theta_min + 1e-3, 1.1, 0.04, 0.1])
    u_alpha = lambda t: 1.5 * np.cos(7.0 * t) - 0.5
    t_end = 0.8
    full = roll_full(man, xhat0, u_alpha, t_end)
    red = roll_reduced(man, xhat0, u_alpha, t_end)
    t_stop = min(full.t[-1], red.t[-1])
    assert t_stop > 0.2  # actually covers most of a stride
    worst = np.zeros(4)
    for t in np.linspace(0.0, t_stop, 200):
        y = full.sol(t)
        proj = np.array([G.theta_of(y[:5]), G.theta_dot_of(y[:5], y[5:10]),
                         y[10], y[11]])
        worst = np.maximum(worst, np.abs(proj - red.sol(t)))
    assert np.max(worst) < 1e-4
    assert worst[0] < 1e-5  # theta gap, tighter per the dual-simulation oracle


def test_reset_preserves_shaping_state(man, rng):
    for _ in range(10):
        xhat = np.array([man.theta_max, rng.uniform(0.4, 2.0),
                         rng.uniform(-0.3, 0.3), rng.uniform(-1.0, 1.0)])
        out = MF.manifold_reset(man, xhat)
        assert out[2] == xhat[2] and out[3] == xhat[3]
        assert abs(out[0] - man.theta_min) < 1e-12


def test_reset_lands_on_manifold(man, model, rng):
    for _ in range(20):
        xhat = np.array([man.theta_max, rng.uniform(0.4, 2.0),
                         rng.uniform(-0.3, 0.3), rng.uniform(-1.0, 1.0)])
        st = MF.lift(man, xhat)
        post = dyn.impact_map(man.model, st)
        assert np.max(np.abs(man.h(post.q, xhat[2]))) < 1e-8
        assert np.max(np.abs(man.h_dot(post.q, post.qdot, xhat[2], xhat[3]))) < 1e-6


def test_reset_off_guard_rejected(man):
    with pytest.raises(MF.ManifoldError):
        MF.manifold_reset(man, np.array([0.0, 1.0, 0.0, 0.0]))


def test_invariance_across_reset(man, model):
    # one full stride plus impact plus a bit of the next stride
    xhat0 = np.array([man.theta_min + 1e-3, 1.2, 0.03, 0.05])
    u_alpha = lambda t: np.sin(5.0 * t)
    sol = roll_full(man, xhat0, u_alpha, 1.5)
    assert sol.t_events[0].size == 1
    t_hit = sol.t_events[0][0]
    y_minus = sol.y_events[0][0]
    worst = max(np.max(np.abs(man.h(sol.sol(t)[:5], sol.sol(t)[10], strict=False)))
                for t in np.linspace(0, t_hit, 120))
    post = dyn.impact_map(model, dyn.FullState(y_minus[:5], y_minus[5:10]))
    y0 = np.concatenate([post.q, post.qdot, y_minus[10:]])
    t_off = t_hit / 3.0
    sol2 = solve_ivp(closed_loop_rhs(man, lambda t: u_alpha(t + t_hit)),
                     (0.0, t_off), y0, rtol=1e-10, atol=1e-12,
                     dense_output=True, max_step=0.01)
    worst2 = max(np.max(np.abs(man.h(sol2.sol(t)[:5], sol2.sol(t)[10], strict=False)))
                 for t in np.linspace(0, sol2.t[-1], 60))
    assert max(worst, worst2) < 1e-6
