import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from safewalk.polynomial import (Polynomial, basis_exponents, fit_least_squares,
                                 lie_derivative, monomial_basis)

V = ("x", "y")
X = Polynomial.variable(V, "x")
Y = Polynomial.variable(V, "y")


def random_poly(rng, variables, degree, scale=1.0):
    expos = basis_exponents(len(variables), degree)
    return Polynomial(variables,
                      {e: scale * rng.standard_normal() for e in expos})


def test_basis_counts():
    assert len(monomial_basis(("a", "b", "c", "d"), 2)) == 15
    mb = monomial_basis(("x",), 4)
    assert [m.terms for m in mb] == [{(k,): 1.0} for k in range(5)]


def test_basis_order_stable():
    a = [tuple(sorted(m.terms)) for m in monomial_basis(V, 3)]
    b = [tuple(sorted(m.terms)) for m in monomial_basis(V, 3)]
    assert a == b


def test_no_zero_terms_stored():
    p = X - X + Y
    assert p.terms == {(0, 1): 1.0}
    assert (p - Y).is_zero()


def test_diff():
    p = X**2
    assert p.diff("x") == 2.0 * X
    assert p.diff("y").is_zero()


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_product_matches_pointwise(seed):
    rng = np.random.default_rng(seed)
    p = random_poly(rng, V, 3)
    q = random_poly(rng, V, 2)
    pts = rng.uniform(-2, 2, size=(20, 2))
    lhs = (p * q).eval_matrix(pts)
    rhs = p.eval_matrix(pts) * q.eval_matrix(pts)
    np.testing.assert_allclose(lhs, rhs, rtol=1e-12, atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_lie_derivative_matches_numeric_gradient(seed):
    rng = np.random.default_rng(seed)
    v = random_poly(rng, V, 4)
    field = {"x": random_poly(rng, V, 2), "y": random_poly(rng, V, 2)}
    lv = lie_derivative(v, field)
    for _ in range(5):
        pt = rng.uniform(-1, 1, 2)
        eps = 1e-6
        gx = (v(pt[0] + eps, pt[1]) - v(pt[0] - eps, pt[1])) / (2 * eps)
        gy = (v(pt[0], pt[1] + eps) - v(pt[0], pt[1] - eps)) / (2 * eps)
        expected = gx * field["x"](*pt) + gy * field["y"](*pt)
        assert lv(*pt) == pytest.approx(expected, abs=1e-6)


def test_substitute_polynomial():
    p = X**2 + Y
    out = p.substitute({"x": Y + 1.0})
    assert out == Y**2 + 3.0 * Y + 1.0


def test_substitute_into_new_variables():
    p = X * Y
    z = Polynomial.variable(("z",), "z")
    out = p.substitute({"x": z})
    assert set(out.vars) == {"y", "z"}
    assert out(**{"y": 2.0, "z": 5.0}) == pytest.approx(10.0)


def test_box_integral_analytic():
    box = {"x": (-1.0, 1.0), "y": (0.0, 2.0)}
    assert Polynomial.constant(V, 1.0).box_integral(box) == pytest.approx(4.0)
    assert (X**2).box_integral(box) == pytest.approx(2.0 / 3.0 * 2.0)
    assert (X * Y).box_integral(box) == pytest.approx(0.0)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_rescale_round_trip(seed):
    rng = np.random.default_rng(seed)
    p = random_poly(rng, V, 3)
    box = {"x": (-0.4, 1.2), "y": (2.0, 3.5)}
    scaled = p.rescale(box)
    for _ in range(5):
        s = rng.uniform(-1, 1, 2)
        orig = np.array([
            0.5 * (box["x"][0] + box["x"][1]) + 0.5 * (box["x"][1] - box["x"][0]) * s[0],
            0.5 * (box["y"][0] + box["y"][1]) + 0.5 * (box["y"][1] - box["y"][0]) * s[1],
        ])
        assert scaled(*s) == pytest.approx(p(*orig), rel=1e-10, abs=1e-10)
    back = scaled.unscale(box)
    pts = rng.uniform(-0.3, 1.0, size=(10, 2))
    np.testing.assert_allclose(back.eval_matrix(pts), p.eval_matrix(pts),
                               rtol=1e-8, atol=1e-8)


def test_fit_recovers_polynomial_data(rng):
    truth = random_poly(rng, V, 2)
    pts = rng.uniform(-1, 1, size=(60, 2))
    fit, rms, worst = fit_least_squares(pts, truth.eval_matrix(pts), V, 2)
    assert worst < 1e-9
    probe = rng.uniform(-1, 1, size=(30, 2))
    np.testing.assert_allclose(fit.eval_matrix(probe), truth.eval_matrix(probe),
                               atol=1e-9)


def test_fit_requires_enough_samples(rng):
    pts = rng.uniform(-1, 1, size=(5, 2))
    with pytest.raises(ValueError, match="samples"):
        fit_least_squares(pts, np.zeros(5), V, 2)


def test_fit_rank_deficiency_detected(rng):
    # all samples on a line: quadratic fit is rank deficient
    t = rng.uniform(-1, 1, 40)
    pts = np.column_stack([t, 2.0 * t])
    with pytest.raises(ValueError, match="rank|degree"):
        fit_least_squares(pts, t**2, V, 2)


def test_negative_exponent_rejected():
    with pytest.raises(ValueError):
        Polynomial(V, {(-1, 0): 1.0})
