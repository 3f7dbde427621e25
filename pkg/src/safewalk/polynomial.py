"""Sparse multivariate polynomials with exact coefficient arithmetic.

The synthesis layer manipulates polynomials over small variable sets
(the four reduced coordinates, doubled for reset relations).  Terms are
stored as a map from exponent tuples to coefficients; all algebra is
plain dict manipulation, so results are exact up to float rounding of
the coefficient arithmetic itself.
"""

from __future__ import annotations

from itertools import combinations_with_replacement
from math import comb

import numpy as np

_ZERO_TOL = 0.0  # exact zeros only; callers prune explicitly if needed


class Polynomial:
    """Immutable sparse polynomial over named variables."""

    __slots__ = ("vars", "terms")

    def __init__(self, variables, terms):
        self.vars = tuple(variables)
        clean = {}
        n = len(self.vars)
        for expo, coef in terms.items():
            expo = tuple(int(e) for e in expo)
            if len(expo) != n or any(e < 0 for e in expo):
                raise ValueError(f"bad exponent tuple {expo} for {n} variables")
            coef = float(coef)
            if coef != 0.0:
                clean[expo] = clean.get(expo, 0.0) + coef
                if clean[expo] == 0.0:
                    del clean[expo]
        self.terms = clean

    # -- constructors ---------------------------------------------------

    @staticmethod
    def zero(variables):
        return Polynomial(variables, {})

    @staticmethod
    def constant(variables, value):
        n = len(tuple(variables))
        return Polynomial(variables, {(0,) * n: value})

    @staticmethod
    def variable(variables, name):
        variables = tuple(variables)
        idx = variables.index(name)
        expo = tuple(1 if i == idx else 0 for i in range(len(variables)))
        return Polynomial(variables, {expo: 1.0})

    @staticmethod
    def monomial(variables, expo, coef=1.0):
        return Polynomial(variables, {tuple(expo): coef})

    # -- bookkeeping ----------------------------------------------------

    @property
    def total_degree(self) -> int:
        return max((sum(e) for e in self.terms), default=0)

    def is_zero(self) -> bool:
        return not self.terms

    def in_vars(self, variables) -> "Polynomial":
        """Reindex onto a (super)set of variables."""
        variables = tuple(variables)
        if variables == self.vars:
            return self
        pos = []
        for v in self.vars:
            if v not in variables:
                raise ValueError(f"variable {v!r} missing from target set")
            pos.append(variables.index(v))
        n = len(variables)
        terms = {}
        for expo, coef in self.terms.items():
            new = [0] * n
            for p, e in zip(pos, expo):
                new[p] = e
            terms[tuple(new)] = terms.get(tuple(new), 0.0) + coef
        return Polynomial(variables, terms)

    @staticmethod
    def _align(a: "Polynomial", b: "Polynomial"):
        if a.vars == b.vars:
            return a, b
        merged = tuple(dict.fromkeys(a.vars + b.vars))
        return a.in_vars(merged), b.in_vars(merged)

    # -- arithmetic -------------------------------------------------------

    def __add__(self, other):
        if isinstance(other, (int, float)):
            other = Polynomial.constant(self.vars, other)
        a, b = Polynomial._align(self, other)
        terms = dict(a.terms)
        for expo, coef in b.terms.items():
            terms[expo] = terms.get(expo, 0.0) + coef
        return Polynomial(a.vars, terms)

    __radd__ = __add__

    def __neg__(self):
        return Polynomial(self.vars, {e: -c for e, c in self.terms.items()})

    def __sub__(self, other):
        return self + (-other if isinstance(other, Polynomial) else -float(other))

    def __rsub__(self, other):
        return (-self) + other

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return Polynomial(self.vars,
                              {e: c * float(other) for e, c in self.terms.items()})
        a, b = Polynomial._align(self, other)
        terms = {}
        for e1, c1 in a.terms.items():
            for e2, c2 in b.terms.items():
                expo = tuple(x + y for x, y in zip(e1, e2))
                terms[expo] = terms.get(expo, 0.0) + c1 * c2
        return Polynomial(a.vars, terms)

    __rmul__ = __mul__

    def __pow__(self, k):
        if not isinstance(k, int) or k < 0:
            raise ValueError("only nonnegative integer powers")
        out = Polynomial.constant(self.vars, 1.0)
        for _ in range(k):
            out = out * self
        return out

    def __eq__(self, other):
        if not isinstance(other, Polynomial):
            return NotImplemented
        a, b = Polynomial._align(self, other)
        return a.terms == b.terms

    def __hash__(self):
        return hash((self.vars, tuple(sorted(self.terms.items()))))

    def __repr__(self):
        if not self.terms:
            return "Polynomial(0)"
        bits = []
        for expo in sorted(self.terms, key=lambda e: (sum(e), e)):
            coef = self.terms[expo]
            mono = "*".join(f"{v}^{e}" if e > 1 else v
                            for v, e in zip(self.vars, expo) if e)
            bits.append(f"{coef:+g}" + (f"*{mono}" if mono else ""))
        return "Polynomial(" + " ".join(bits) + ")"

    # -- calculus ---------------------------------------------------------

    def diff(self, name) -> "Polynomial":
        idx = self.vars.index(name)
        terms = {}
        for expo, coef in self.terms.items():
            e = expo[idx]
            if e == 0:
                continue
            new = expo[:idx] + (e - 1,) + expo[idx + 1:]
            terms[new] = terms.get(new, 0.0) + coef * e
        return Polynomial(self.vars, terms)

    def substitute(self, mapping) -> "Polynomial":
        """Replace variables by polynomials (or numbers).

        Unmapped variables pass through.  The result lives over the
        union of the remaining variables and the substitutions'.
        """
        mapping = {
            k: v if isinstance(v, Polynomial) else
            Polynomial.constant((), v).in_vars(())
            for k, v in mapping.items()
        }
        kept = tuple(v for v in self.vars if v not in mapping)
        out_vars = tuple(dict.fromkeys(
            kept + tuple(w for p in mapping.values() for w in p.vars)))
        out = Polynomial.zero(out_vars)
        for expo, coef in self.terms.items():
            term = Polynomial.constant(out_vars, coef)
            for v, e in zip(self.vars, expo):
                if e == 0:
                    continue
                factor = mapping.get(v, Polynomial.variable(out_vars, v) if v in out_vars else None)
                if factor is None:
                    raise ValueError(f"variable {v!r} lost in substitution")
                term = term * factor**e
            out = out + term
        return out.in_vars(out_vars) if out.vars != out_vars else out

    def gradient(self):
        return [self.diff(v) for v in self.vars]

    # -- evaluation ---------------------------------------------------------

    def __call__(self, *args, **kwargs):
        """Evaluate at a point or vectorized over arrays.

        Accepts positional values in variable order, or keyword values
        by name.  Array inputs broadcast.
        """
        if kwargs:
            vals = [np.asarray(kwargs[v], dtype=float) for v in self.vars]
        elif len(args) == 1 and isinstance(args[0], dict):
            vals = [np.asarray(args[0][v], dtype=float) for v in self.vars]
        else:
            if len(args) != len(self.vars):
                raise ValueError(f"expected {len(self.vars)} values")
            vals = [np.asarray(a, dtype=float) for a in args]
        out = 0.0
        for expo, coef in self.terms.items():
            term = coef
            for v, e in zip(vals, expo):
                if e:
                    term = term * v**e
            out = out + term
        return out

    def eval_matrix(self, points: np.ndarray) -> np.ndarray:
        """Evaluate at rows of an (m, n_vars) array."""
        points = np.atleast_2d(np.asarray(points, dtype=float))
        out = np.zeros(points.shape[0])
        for expo, coef in self.terms.items():
            term = np.full(points.shape[0], coef)
            for j, e in enumerate(expo):
                if e:
                    term *= points[:, j]**e
            out += term
        return out

    # -- integration and scaling --------------------------------------------

    def box_integral(self, box) -> float:
        """Exact integral over an axis-aligned box {var: (lo, hi)}."""
        bounds = [box[v] for v in self.vars]
        total = 0.0
        for expo, coef in self.terms.items():
            term = coef
            for (lo, hi), e in zip(bounds, expo):
                term *= (hi**(e + 1) - lo**(e + 1)) / (e + 1)
            total += term
        return total

    def rescale(self, box) -> "Polynomial":
        """Pull back onto the unit box: p_scaled(s) = p(center + half*s).

        With box = {var: (lo, hi)}, the result evaluated at s in
        [-1, 1]^n equals self at the corresponding original point.
        """
        mapping = {}
        for v in self.vars:
            lo, hi = box[v]
            s = Polynomial.variable(self.vars, v)
            mapping[v] = 0.5 * (hi + lo) + 0.5 * (hi - lo) * s
        return self.substitute(mapping)

    def unscale(self, box) -> "Polynomial":
        """Inverse of rescale: express a unit-box polynomial in
        original coordinates."""
        mapping = {}
        for v in self.vars:
            lo, hi = box[v]
            x = Polynomial.variable(self.vars, v)
            mapping[v] = (x - 0.5 * (hi + lo)) * (2.0 / (hi - lo))
        return self.substitute(mapping)


def monomial_basis(variables, max_degree: int):
    """All monomials up to max_degree in graded lexicographic order."""
    variables = tuple(variables)
    n = len(variables)
    out = []
    for d in range(max_degree + 1):
        block = []
        for combo in combinations_with_replacement(range(n), d):
            expo = [0] * n
            for idx in combo:
                expo[idx] += 1
            block.append(tuple(expo))
        # lexicographic within the degree block, largest first on the
        # leading variable for a stable, conventional order
        block.sort(reverse=True)
        out.extend(Polynomial.monomial(variables, e) for e in block)
    assert len(out) == comb(n + max_degree, max_degree)
    return out


def basis_exponents(n_vars: int, max_degree: int):
    """Exponent tuples matching monomial_basis ordering."""
    out = []
    for d in range(max_degree + 1):
        block = []
        for combo in combinations_with_replacement(range(n_vars), d):
            expo = [0] * n_vars
            for idx in combo:
                expo[idx] += 1
            block.append(tuple(expo))
        block.sort(reverse=True)
        out.extend(block)
    return out


def lie_derivative(p: Polynomial, field) -> Polynomial:
    """Derivative of p along a vector field given per variable.

    field maps variable name -> Polynomial (or number); variables
    absent from the field are treated as constants.
    """
    out = Polynomial.zero(p.vars)
    for v in p.vars:
        if v not in field:
            continue
        f_v = field[v]
        if not isinstance(f_v, Polynomial):
            f_v = Polynomial.constant(p.vars, f_v)
        out = out + p.diff(v) * f_v
    return out


def fit_least_squares(points: np.ndarray, values: np.ndarray, variables,
                      degree: int, rcond: float = 1e-10):
    """Least-squares polynomial fit over sample rows.

    Returns (Polynomial, rms_residual, max_residual).  Raises on
    rank-deficient design matrices.
    """
    points = np.asarray(points, dtype=float)
    values = np.asarray(values, dtype=float)
    expos = basis_exponents(points.shape[1], degree)
    A = np.ones((points.shape[0], len(expos)))
    for j, expo in enumerate(expos):
        for k, e in enumerate(expo):
            if e:
                A[:, j] *= points[:, k]**e
    if points.shape[0] < 2 * len(expos):
        raise ValueError(
            f"{points.shape[0]} samples for {len(expos)} basis functions; "
            "need at least twice as many")
    coef, _, rank, _ = np.linalg.lstsq(A, values, rcond=rcond)
    if rank < len(expos):
        raise ValueError(
            f"rank-deficient fit (rank {rank} < {len(expos)}); reduce degree")
    resid = A @ coef - values
    poly = Polynomial(variables, dict(zip(expos, coef)))
    return poly, float(np.sqrt(np.mean(resid**2))), float(np.max(np.abs(resid)))
