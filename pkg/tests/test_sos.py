"""Sum-of-squares layer: compilation, solving, independent verification."""

import numpy as np
import pytest

from safewalk.polynomial import Polynomial
from safewalk.sos import (BilinearError, PolyExpr, SosProgram,
                          decision_polynomial, compile_program,
                          solve_program, verify_solution)


def _scalar_unknown(name, vars_):
    return PolyExpr(tuple(vars_), Polynomial.zero(vars_),
                    {name: Polynomial.constant(vars_, 1.0)})


def test_univariate_lower_bound_matches_scan_oracle():
    t = Polynomial.variable(("t",), "t")
    p = t**4 - 3 * t**2 + 2 * t + 3
    prog = SosProgram()
    prog.require_sos("lower", PolyExpr.wrap(("t",), p)
                     - _scalar_unknown("gamma", ("t",)))
    prog.objective = {"gamma": -1.0}      # maximize gamma
    sol = solve_program(prog)
    assert sol.status == "optimal"
    ts = np.linspace(-3.0, 3.0, 2_000_001)
    true_min = np.min(ts**4 - 3 * ts**2 + 2 * ts + 3)
    # univariate nonnegativity is exactly SoS, so the bound is tight
    assert sol.values["gamma"] == pytest.approx(true_min, abs=1e-6)
    report = verify_solution(prog, sol)
    assert report["passed"]
    entry = report["constraints"]["lower"]
    assert entry["min_eig"] >= -1e-7
    assert entry["coeff_residual"] <= 1e-8


def test_bivariate_lower_bound():
    vars_ = ("x", "y")
    x = Polynomial.variable(vars_, "x")
    y = Polynomial.variable(vars_, "y")
    p = x**2 + y**2 + 0.5
    prog = SosProgram()
    prog.require_sos("c", PolyExpr.wrap(vars_, p)
                     - _scalar_unknown("g", vars_))
    prog.objective = {"g": -1.0}
    sol = solve_program(prog)
    assert sol.status == "optimal"
    assert sol.values["g"] == pytest.approx(0.5, abs=1e-6)
    assert verify_solution(prog, sol)["passed"]


def test_decision_polynomial_identity_fit():
    # find q(t) of degree 2 with (t^2 + 2t + 5) - q(t) SoS and
    # q(t) - (t^2 + 2t + 1) SoS while maximizing q's constant term:
    # optimum pins q = t^2 + 2t + 5.
    t = Polynomial.variable(("t",), "t")
    q, names = decision_polynomial("q", ("t",), 2)
    upper = PolyExpr.wrap(("t",), t**2 + 2 * t + 5) - q
    lower = q - PolyExpr.wrap(("t",), t**2 + 2 * t + 1)
    prog = SosProgram()
    prog.require_sos("upper", upper)
    prog.require_sos("lower", lower)
    prog.objective = {names[0]: -1.0}
    sol = solve_program(prog)
    assert sol.status == "optimal"
    achieved = q.value(sol.values)
    target = t**2 + 2 * t + 5
    for mono in set(achieved.terms) | set(target.terms):
        assert achieved.terms.get(mono, 0.0) == pytest.approx(
            target.terms.get(mono, 0.0), abs=1e-5)
    assert verify_solution(prog, sol)["passed"]


def test_bilinear_product_raises_with_culprits():
    a, _ = decision_polynomial("a", ("t",), 1)
    b, _ = decision_polynomial("b", ("t",), 1)
    with pytest.raises(BilinearError, match=r"a\[0\].*b\[0\]"):
        a * b


def test_fix_resolves_bilinearity():
    a, _ = decision_polynomial("a", ("t",), 1)
    b, _ = decision_polynomial("b", ("t",), 1)
    prod = a * b.fix({"b[0]": 1.0, "b[1]": 2.0})
    assert prod.degree() == 2
    assert set(prod.unknowns) == {"a[0]", "a[1]"}


def test_fix_partial_and_value():
    a, names = decision_polynomial("a", ("t",), 1)
    partial = a.fix({names[0]: 3.0})
    assert partial.unknowns == (names[1],)
    full = partial.value({names[1]: -2.0})
    t = Polynomial.variable(("t",), "t")
    assert full == Polynomial.constant(("t",), 3.0) + t * (-2.0)


def test_compile_block_structure():
    vars_ = ("x", "y")
    x = Polynomial.variable(vars_, "x")
    prog = SosProgram()
    prog.require_sos("c", PolyExpr.wrap(vars_, x**4 + 1.0)
                     - _scalar_unknown("g", vars_))
    prog.objective = {"g": -1.0}
    problem, info = compile_program(prog)
    # degree-4 bivariate Gram basis: monomials of degree <= 2 -> size 6
    assert problem.block_sizes == [6]
    assert info.unknown_order == ["g"]
    assert len(info.block_bases[0]) == 6


def test_verify_rejects_tampered_values():
    t = Polynomial.variable(("t",), "t")
    prog = SosProgram()
    prog.require_sos("lower", PolyExpr.wrap(("t",), t**2 + 1.0)
                     - _scalar_unknown("g", ("t",)))
    prog.objective = {"g": -1.0}
    sol = solve_program(prog)
    assert sol.status == "optimal"
    sol.values["g"] -= 0.5   # claim a weaker bound than the Gram encodes
    report = verify_solution(prog, sol)
    assert not report["passed"]
    assert report["constraints"]["lower"]["coeff_residual"] > 1e-3


def test_not_sos_does_not_return_optimal_certificate():
    # The Motzkin form is nonnegative but not a sum of squares, so
    # maximizing a lower bound gamma has no attainable optimum.
    vars_ = ("x", "y")
    x = Polynomial.variable(vars_, "x")
    y = Polynomial.variable(vars_, "y")
    motzkin = x**4 * y**2 + x**2 * y**4 - 3 * x**2 * y**2 + 1.0
    prog = SosProgram()
    prog.require_sos("m", PolyExpr.wrap(vars_, motzkin)
                     - _scalar_unknown("g", vars_))
    prog.objective = {"g": -1.0}
    sol = solve_program(prog, max_iter=60)
    if sol.status == "optimal":
        # if the solver does claim success the certificate must verify
        assert verify_solution(prog, sol)["passed"]
        assert sol.values["g"] <= 0.0
    else:
        assert sol.values == {}
