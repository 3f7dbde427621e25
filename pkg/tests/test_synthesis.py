import numpy as np
import pytest

from safewalk.approx import (InputBounds, PolynomialBundle, SemiAlgebraicSet,
                             UnsafeSet, VARS, VARS_PAIR,
                             structural_unsafe_pieces)
from safewalk.polynomial import Polynomial
from safewalk.synthesis import (SynthesisConfig, SynthesisError,
                                ViabilityCertificate, alternate, reset_rate,
                                simulate_labels, stitch_pieces)

# An analytically solvable stand-in for the walker's reduced model:
#
#   theta_dot' = 0.3,   alpha'' = u in [-1, 1],   reset: theta_dot -> theta_dot/2
#
# Along the flow w = theta_dot^2 + 0.6 (1 - theta) is conserved, so on
# the alpha = 0 slice the viability kernel is exactly
#
#   theta_dot > 0  and  w < (face cutoff)^2
#
# where the face cutoff 1.505 comes from the structural velocity-face
# slab at theta_dot_hi - 0.05 * span.  The post-reset rate fixed point
# is sqrt(0.2).

FACE_CUT = 1.505
W_MAX = FACE_CUT ** 2


def toy_bundle():
    box = {"theta": (0.0, 1.0), "theta_dot": (-0.3, 1.6),
           "alpha": (-0.35, 0.35), "alpha_dot": (-1.5, 1.5)}

    def c(v):
        return Polynomial.constant(VARS, v)

    def var(n):
        return Polynomial.variable(VARS, n)

    f = (var("theta_dot"), c(0.3), var("alpha_dot"), c(0.0))
    g = (c(0.0), c(0.0), c(0.0), c(1.0))
    e = (c(0.0), c(0.02), c(0.0), c(0.0))
    bounds = InputBounds(u_min=c(-1.0), u_max=c(1.0),
                         margin_lo=0.0, margin_hi=0.0)
    pieces = structural_unsafe_pieces(box) + (
        SemiAlgebraicSet((0.5 - (bounds.u_max - bounds.u_min),),
                         name="narrow-input-box"),)
    unsafe = UnsafeSet(pieces)

    def pv(n):
        return Polynomial.variable(VARS_PAIR, n)

    h_S = SemiAlgebraicSet((pv("theta") - (1.0 - 1e-3), pv("theta_dot")),
                           name="guard-outer")
    d = 1e-3
    h_R = SemiAlgebraicSet((
        pv("theta_post"), -pv("theta_post"),
        pv("alpha_post") - pv("alpha"), pv("alpha") - pv("alpha_post"),
        pv("alpha_dot_post") - pv("alpha_dot"),
        pv("alpha_dot") - pv("alpha_dot_post"),
        d - (pv("theta_dot_post") - 0.5 * pv("theta_dot")),
        (pv("theta_dot_post") - 0.5 * pv("theta_dot")) + d,
    ), name="reset-relation")
    return PolynomialBundle(box=box, f_p=f, g_p=g, e_p=e, bounds=bounds,
                            unsafe=unsafe, h_S=h_S, h_R=h_R, seed=0, stats={})


@pytest.fixture(scope="module")
def bundle():
    return toy_bundle()


# -- reset-rate recovery -----------------------------------------------------


def test_reset_rate_recovers_halving(bundle):
    rho = reset_rate(bundle)
    rng = np.random.default_rng(3)
    pts = rng.uniform(-1.0, 1.6, size=(64, 4))
    np.testing.assert_allclose(rho.eval_matrix(pts), 0.5 * pts[:, 1],
                               rtol=0, atol=1e-12)


def test_reset_rate_requires_one_sided_rows(bundle):
    broken = PolynomialBundle(
        box=bundle.box, f_p=bundle.f_p, g_p=bundle.g_p, e_p=bundle.e_p,
        bounds=bundle.bounds, unsafe=bundle.unsafe, h_S=bundle.h_S,
        h_R=SemiAlgebraicSet((Polynomial.variable(VARS_PAIR, "theta_post"),),
                             name="reset-relation"),
        seed=0, stats={})
    with pytest.raises(SynthesisError, match="one-sided"):
        reset_rate(broken)


# -- simulation-based labels -------------------------------------------------


def test_labels_fixed_point_is_viable(bundle):
    pts = np.array([
        [0.0, np.sqrt(0.2), 0.0, 0.0],     # post-reset fixed point
        [0.5, 0.8, 0.0, 0.0],              # mid-stride, comfortable speed
    ])
    assert simulate_labels(bundle, pts, n_strides=3).all()


def test_labels_reject_obvious_failures(bundle):
    pts = np.array([
        [0.0, -0.1, 0.0, 0.0],             # moving backward
        [0.0, 0.0, 0.0, 0.0],              # stalled on the backward slab
        [0.0, 1.55, 0.0, 0.0],             # hits the velocity face slab
        [0.5, 1.5, 0.0, 0.0],              # w too large: face slab at guard
    ])
    assert not simulate_labels(bundle, pts, n_strides=3).any()


def test_labels_match_conserved_quantity_kernel(bundle):
    rng = np.random.default_rng(11)
    n = 4000
    pts = np.column_stack([rng.uniform(0.0, 1.0, n),
                           rng.uniform(-0.2, 1.6, n),
                           np.zeros(n), np.zeros(n)])
    w = pts[:, 1] ** 2 + 0.6 * (1.0 - pts[:, 0])
    margin = 0.05
    clear = ((np.abs(w - W_MAX) > margin)
             & (np.abs(pts[:, 1]) > margin)
             & (np.abs(pts[:, 1] - FACE_CUT) > margin))
    truth = (pts[:, 1] > 0.0) & (w < W_MAX) & (pts[:, 1] < FACE_CUT)
    labels = simulate_labels(bundle, pts, n_strides=3)
    mismatch = np.mean(labels[clear] != truth[clear])
    assert mismatch < 0.01
    # labels must be sound against the analytic kernel even at the fringe
    assert not np.any(labels & ~(w < W_MAX + margin))


# -- certificate container ---------------------------------------------------


def handmade_certificate():
    box = {"theta": (0.0, 1.0), "theta_dot": (-1.0, 1.0),
           "alpha": (-1.0, 1.0), "alpha_dot": (-1.0, 1.0)}
    boxes = [dict(box, theta=(0.0, 0.5)), dict(box, theta=(0.5, 1.0))]
    one = Polynomial(VARS, {(0, 0, 0, 0): 1.0})
    v = Polynomial(VARS, {(1, 0, 0, 0): 1.0, (0, 2, 0, 0): -0.25})
    q = {0: Polynomial(VARS, {(0, 0, 1, 1): 2.0})}
    return ViabilityCertificate(
        theta_edges=np.array([0.0, 0.5, 1.0]), boxes=boxes,
        v_unit=[v, 2.0 * v], u_unit=[2.0 * one, -1.0 * one],
        lam_unit=[one, one], q_unit=[q, {}], box=box,
        config=SynthesisConfig(n_pieces=2),
        history=[{"round": 0, "margin": -0.5}],
        verification={"pieces": []})


def test_certificate_piece_index():
    cert = handmade_certificate()
    assert cert.n_pieces == 2
    np.testing.assert_array_equal(
        cert.piece_index([-1.0, 0.2, 0.5, 0.7, 2.0]), [0, 0, 1, 1, 1])


def test_certificate_save_load_roundtrip(tmp_path):
    cert = handmade_certificate()
    path = tmp_path / "cert.json"
    cert.save(path)
    back = ViabilityCertificate.load(path)
    assert back.n_pieces == cert.n_pieces
    np.testing.assert_allclose(back.theta_edges, cert.theta_edges)
    assert back.boxes == cert.boxes
    assert back.box == cert.box
    rng = np.random.default_rng(5)
    pts = rng.uniform(-1.0, 1.0, size=(50, 4))
    pts[:, 0] = rng.uniform(0.0, 1.0, 50)
    np.testing.assert_allclose(back.barrier(pts), cert.barrier(pts),
                               rtol=0, atol=1e-12)
    np.testing.assert_allclose(back.control(pts), cert.control(pts),
                               rtol=0, atol=1e-12)
    for qa, qb in zip(back.q_unit, cert.q_unit):
        assert set(qa) == set(qb)
    assert back.config == cert.config
    assert back.history == cert.history


def test_certificate_load_rejects_other_files(tmp_path):
    path = tmp_path / "other.json"
    path.write_text('{"format": "something-else/1"}')
    with pytest.raises(SynthesisError, match="not a viability certificate"):
        ViabilityCertificate.load(path)


def test_config_validation():
    with pytest.raises(SynthesisError):
        SynthesisConfig(n_pieces=0)


# -- full alternation on the solvable system ---------------------------------


@pytest.mark.slow
def test_alternation_certifies_toy_kernel(bundle):
    config = SynthesisConfig(n_pieces=2, max_alternations=18)
    cert = alternate(bundle, config)
    # the final barrier and every per-piece controller were verified at
    # the Gram level
    assert cert.verification["phase_a"]["passed"]
    assert all(r["passed"] for r in cert.verification["phase_b"])
    report = stitch_pieces(cert, n_random=20000)
    assert report["passed"]
    # the certified set must contain the nominal orbit and stay inside
    # the analytic kernel
    rng = np.random.default_rng(17)
    n = 40000
    pts = np.column_stack([rng.uniform(0.0, 1.0, n),
                           rng.uniform(0.0, 1.6, n),
                           np.zeros(n), np.zeros(n)])
    inside = cert.contains(pts)
    w = pts[:, 1] ** 2 + 0.6 * (1.0 - pts[:, 0])
    kernel = (pts[:, 1] > 0.0) & (w < W_MAX) & (pts[:, 1] < FACE_CUT)
    assert not np.any(inside & ~kernel)
    orbit = np.array([[th, np.sqrt(0.2 + 0.6 * th), 0.0, 0.0]
                      for th in np.linspace(0.02, 0.98, 9)])
    assert cert.contains(orbit).all()
    assert inside.sum() > 0.02 * n
