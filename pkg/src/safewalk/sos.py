"""Sum-of-squares programming layer over the internal SDP solver.

A ``PolyExpr`` is a polynomial whose coefficients are affine in named
scalar unknowns and in SoS multiplier polynomials.  Products that would
couple unknowns from both factors raise ``BilinearError`` naming the
culprits; the synthesis alternation relies on this to guarantee each
phase stays convex.

Multipliers (``SosMultiplier``) are unknown polynomials constrained to
be sums of squares.  The compiler represents each one directly by its
Gram matrix: its coefficients never become scalar variables and no
separate membership constraint is emitted, which keeps the assembled
SDPs small.

``compile_program`` turns "expression is a sum of squares" constraints
into one Gram (PSD) block per constraint plus coefficient-matching
equalities, with the scalar unknowns as free variables of the SDP.
``verify_solution`` re-checks a returned certificate independently of
the solver: Gram eigenvalues, coefficient-matching residuals, and
random pointwise evaluations.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .polynomial import Polynomial, basis_exponents
from .sdp import SdpProblem, SdpSolution, solve_sdp


class BilinearError(ValueError):
    pass


class SosError(RuntimeError):
    pass


@dataclass(frozen=True)
class SosMultiplier:
    """Unknown polynomial constrained to be a sum of squares; realized
    as a Gram block, never as scalar coefficients."""

    name: str
    vars: tuple
    degree: int

    def __post_init__(self):
        if self.degree < 0 or self.degree % 2:
            raise SosError(f"multiplier {self.name!r} needs an even "
                           f"nonnegative degree, got {self.degree}")

    @property
    def basis(self):
        return basis_exponents(len(self.vars), self.degree // 2)

    def from_gram(self, gram) -> Polynomial:
        basis = self.basis
        terms = {}
        for p, bp in enumerate(basis):
            for q, bq in enumerate(basis):
                mono = tuple(a + b for a, b in zip(bp, bq))
                terms[mono] = terms.get(mono, 0.0) + gram[p, q]
        return Polynomial(self.vars, terms)


@dataclass(frozen=True)
class PolyExpr:
    """Polynomial with coefficients affine in scalar unknowns and SoS
    multipliers: ``const + sum_u lin[u]*u + sum_m mult[m]*m``."""

    vars: tuple
    const: Polynomial
    lin: dict = field(default_factory=dict)
    mult: dict = field(default_factory=dict)

    @staticmethod
    def wrap(vars_, value):
        if isinstance(value, PolyExpr):
            return value
        if isinstance(value, Polynomial):
            return PolyExpr(tuple(vars_), value.in_vars(vars_))
        return PolyExpr(tuple(vars_),
                        Polynomial.constant(vars_, float(value)))

    @property
    def unknowns(self):
        return tuple(sorted(self.lin))

    @property
    def multipliers(self):
        return tuple(sorted(self.mult, key=lambda m: m.name))

    def _all_names(self):
        return sorted(self.lin) + sorted(m.name for m in self.mult)

    def __add__(self, other):
        other = PolyExpr.wrap(self.vars, other)
        lin = dict(self.lin)
        for name, poly in other.lin.items():
            lin[name] = lin.get(name, Polynomial.zero(self.vars)) + poly
        mult = dict(self.mult)
        for m, poly in other.mult.items():
            mult[m] = mult.get(m, Polynomial.zero(self.vars)) + poly
        return PolyExpr(self.vars, self.const + other.const, lin, mult)

    __radd__ = __add__

    def __neg__(self):
        return PolyExpr(self.vars, -self.const,
                        {k: -p for k, p in self.lin.items()},
                        {m: -p for m, p in self.mult.items()})

    def __sub__(self, other):
        return self + (-PolyExpr.wrap(self.vars, other))

    def __rsub__(self, other):
        return PolyExpr.wrap(self.vars, other) - self

    def __mul__(self, other):
        other = PolyExpr.wrap(self.vars, other)
        if (self.lin or self.mult) and (other.lin or other.mult):
            raise BilinearError(
                "product couples decision quantities "
                f"{self._all_names()} with {other._all_names()}; "
                "fix one side before multiplying")
        known, unknown = ((self, other) if (other.lin or other.mult)
                          else (other, self))
        return PolyExpr(self.vars, known.const * unknown.const,
                        {k: known.const * p
                         for k, p in unknown.lin.items()},
                        {m: known.const * p
                         for m, p in unknown.mult.items()})

    __rmul__ = __mul__

    def diff(self, name) -> "PolyExpr":
        if self.mult:
            raise SosError("cannot differentiate through an unknown "
                           "multiplier polynomial")
        return PolyExpr(self.vars, self.const.diff(name),
                        {k: p.diff(name) for k, p in self.lin.items()})

    def substitute(self, mapping) -> "PolyExpr":
        if self.mult:
            raise SosError("cannot substitute into an unknown "
                           "multiplier polynomial")
        const = self.const.substitute(mapping)
        lin = {k: p.substitute(mapping) for k, p in self.lin.items()}
        return PolyExpr(const.vars, const,
                        {k: p.in_vars(const.vars) for k, p in lin.items()})

    def degree(self) -> int:
        degs = [self.const.total_degree]
        degs += [p.total_degree for p in self.lin.values()]
        degs += [m.degree + p.total_degree for m, p in self.mult.items()]
        return max(degs)

    def fix(self, values: dict) -> "PolyExpr":
        """Substitute numeric values for (some) scalar unknowns."""
        const = self.const
        lin = {}
        for name, poly in self.lin.items():
            if name in values:
                const = const + poly * float(values[name])
            else:
                lin[name] = poly
        return PolyExpr(self.vars, const, lin, dict(self.mult))

    def value(self, values: dict, multipliers: dict = None) -> Polynomial:
        out = self.fix(values)
        const = out.const
        multipliers = multipliers or {}
        unresolved = []
        for m, factor in out.mult.items():
            if m.name in multipliers:
                const = const + factor * multipliers[m.name].in_vars(
                    self.vars)
            else:
                unresolved.append(m.name)
        if out.lin or unresolved:
            raise SosError("unresolved decision quantities "
                           f"{list(out.lin) + unresolved}")
        return const

    def coefficient_rows(self, unknown_order):
        """All monomials with the constant coefficient and the row of
        per-unknown coefficients for each (multiplier terms excluded)."""
        monos = set(self.const.terms)
        for poly in self.lin.values():
            monos.update(poly.terms)
        index = {u: k for k, u in enumerate(unknown_order)}
        rows = []
        for mono in sorted(monos):
            coeffs = np.zeros(len(unknown_order))
            for name, poly in self.lin.items():
                c = poly.terms.get(mono, 0.0)
                if c:
                    coeffs[index[name]] = c
            rows.append((mono, self.const.terms.get(mono, 0.0), coeffs))
        return rows


def decision_polynomial(prefix: str, vars_, degree: int):
    """A fully parameterized polynomial of the given total degree; the
    unknowns are named ``prefix[k]`` following graded-lex basis order."""
    vars_ = tuple(vars_)
    expr = PolyExpr(vars_, Polynomial.zero(vars_))
    names = []
    for k, expo in enumerate(basis_exponents(len(vars_), degree)):
        name = f"{prefix}[{k}]"
        names.append(name)
        expr = expr + PolyExpr(vars_, Polynomial.zero(vars_),
                               {name: Polynomial.monomial(vars_, expo)})
    return expr, names


@dataclass
class SosProgram:
    """Minimize a linear functional of the unknowns subject to SoS
    membership of each named expression."""

    constraints: list = field(default_factory=list)   # (name, PolyExpr)
    objective: dict = field(default_factory=dict)     # unknown -> coeff
    _mult_names: set = field(default_factory=set)

    def require_sos(self, name: str, expr: PolyExpr):
        if any(n == name for n, _ in self.constraints):
            raise SosError(f"duplicate constraint name {name!r}")
        self.constraints.append((name, expr))

    def multiplier(self, name: str, vars_, degree: int) -> PolyExpr:
        """Fresh SoS multiplier polynomial usable inside expressions."""
        if name in self._mult_names:
            raise SosError(f"duplicate multiplier name {name!r}")
        self._mult_names.add(name)
        vars_ = tuple(vars_)
        m = SosMultiplier(name, vars_, degree)
        return PolyExpr(vars_, Polynomial.zero(vars_),
                        mult={m: Polynomial.constant(vars_, 1.0)})

    def unknown_order(self):
        seen = {}
        for _, expr in self.constraints:
            for u in expr.unknowns:
                seen.setdefault(u, len(seen))
        for u in self.objective:
            if u not in seen:
                seen[u] = len(seen)
        return sorted(seen, key=seen.get)

    def multiplier_order(self):
        seen = {}
        for _, expr in self.constraints:
            for m in expr.multipliers:
                seen.setdefault(m, len(seen))
        return sorted(seen, key=seen.get)


@dataclass
class CompileInfo:
    unknown_order: list
    block_names: list      # constraint names, then multiplier names
    block_bases: list      # exponent tuples per constraint block
    mult_order: list       # SosMultiplier objects, block-aligned


def _gram_basis(expr: PolyExpr):
    """Monomial basis for the Gram matrix: all monomials of degree at
    most ceil(deg/2) (full basis keeps compilation simple; degrees are
    kept small upstream)."""
    half = (expr.degree() + 1) // 2
    return basis_exponents(len(expr.vars), half)


def _product_map(basis):
    """Monomial -> indicator matrix over the given Gram basis."""
    nb = len(basis)
    out = {}
    for p in range(nb):
        for q in range(nb):
            mono = tuple(a + b for a, b in zip(basis[p], basis[q]))
            mat = out.setdefault(mono, np.zeros((nb, nb)))
            mat[p, q] += 1.0
    return out


def compile_program(prog: SosProgram, trace_penalty: float = 1e-7):
    """Build the block-diagonal SDP: one Gram block per SoS constraint
    and per multiplier, coefficient-matching equalities, scalar
    unknowns as free variables.  ``trace_penalty`` puts a small trace
    cost on multiplier blocks so they stay bounded when the objective
    does not touch them."""
    if not prog.constraints:
        raise SosError("program has no SoS constraints")
    unknowns = prog.unknown_order()
    nf = len(unknowns)
    uindex = {u: k for k, u in enumerate(unknowns)}
    mults = prog.multiplier_order()
    n_cons = len(prog.constraints)
    mindex = {m: n_cons + k for k, m in enumerate(mults)}
    mult_maps = {m: _product_map(m.basis) for m in mults}

    block_sizes = []
    bases = []
    names = []
    for name, expr in prog.constraints:
        basis = _gram_basis(expr)
        block_sizes.append(len(basis))
        bases.append(basis)
        names.append(name)
    for m in mults:
        block_sizes.append(len(m.basis))
        names.append(m.name)

    a_rows = []
    b_vals = []
    bf_rows = []
    for bidx, (name, expr) in enumerate(prog.constraints):
        products = _product_map(bases[bidx])
        rows = {mono: (c0, lin) for mono, c0, lin
                in expr.coefficient_rows(unknowns)}
        # multiplier-term contributions per monomial: the coefficient
        # of gamma in factor*sigma is sum_delta factor[gamma-delta] *
        # <indicator_delta, Gram_sigma>.
        mult_rows = {}
        for m, factor in expr.mult.items():
            pmap = mult_maps[m]
            for fmono, fcoef in factor.terms.items():
                for dmono, ind in pmap.items():
                    gamma = tuple(a + b for a, b in zip(fmono, dmono))
                    per = mult_rows.setdefault(gamma, {})
                    blk = mindex[m]
                    if blk in per:
                        per[blk] = per[blk] + fcoef * ind
                    else:
                        per[blk] = fcoef * ind
        all_monos = set(products) | set(rows) | set(mult_rows)
        for mono in sorted(all_monos):
            c0, lin = rows.get(mono, (0.0, np.zeros(nf)))
            row = {}
            if mono in products:
                row[bidx] = products[mono]
            for blk, mat in mult_rows.get(mono, {}).items():
                row[blk] = -mat
            a_rows.append(row)
            b_vals.append(c0)
            bf_rows.append(-lin)

    c_free = np.zeros(nf)
    for u, coeff in prog.objective.items():
        if u not in uindex:
            raise SosError(f"objective references unknown {u!r} not in "
                           "any constraint")
        c_free[uindex[u]] = float(coeff)
    c_blocks = {}
    if trace_penalty:
        for m in mults:
            blk = mindex[m]
            c_blocks[blk] = trace_penalty * np.eye(block_sizes[blk])

    problem = SdpProblem(block_sizes=block_sizes, c_blocks=c_blocks,
                         a_blocks=a_rows, b=np.array(b_vals),
                         b_free=np.array(bf_rows), c_free=c_free)
    return problem, CompileInfo(unknown_order=unknowns, block_names=names,
                                block_bases=bases, mult_order=mults)


@dataclass
class SosSolution:
    status: str
    values: dict
    grams: dict
    mult_values: dict      # multiplier name -> Polynomial
    sdp: SdpSolution
    info: CompileInfo


def solve_program(prog: SosProgram, tol: float = 1e-8,
                  max_iter: int = 100,
                  trace_penalty: float = 1e-7,
                  accept_tol: float = 1e-3) -> SosSolution:
    """Compile and solve.  A run that stops short of full interior-point
    convergence but lands within ``accept_tol`` on primal, dual, and gap
    residuals is reported as "near_optimal" with its iterate extracted;
    downstream users must gate such solutions on ``verify_solution``,
    which re-checks the Grams independently of the solver."""
    problem, info = compile_program(prog, trace_penalty=trace_penalty)
    sdp = solve_sdp(problem, tol=tol, max_iter=max_iter)
    if sdp.status in ("max_iterations", "numerical_failure") and \
            max(sdp.residuals["primal"], sdp.residuals["dual"],
                sdp.residuals["gap"]) < accept_tol:
        sdp = replace(sdp, status="near_optimal")
    values = {}
    grams = {}
    mult_values = {}
    if sdp.status in ("optimal", "near_optimal"):
        values = {u: float(v) for u, v in zip(info.unknown_order, sdp.f)}
        n_cons = len(info.block_bases)
        grams = {name: sdp.x_blocks[k]
                 for k, name in enumerate(info.block_names[:n_cons])}
        for k, m in enumerate(info.mult_order):
            gram = sdp.x_blocks[n_cons + k]
            grams[m.name] = gram
            mult_values[m.name] = m.from_gram(gram)
    return SosSolution(status=sdp.status, values=values, grams=grams,
                       mult_values=mult_values, sdp=sdp, info=info)


def verify_solution(prog: SosProgram, sol: SosSolution,
                    eig_tol: float = 1e-7, coeff_tol: float = 1e-8,
                    n_points: int = 200, seed: int = 0) -> dict:
    """Independent certificate check: for every constraint, the Gram
    matrix must be (numerically) PSD and reproduce the achieved
    polynomial's coefficients; random pointwise evaluations must agree;
    every multiplier Gram must itself be PSD."""
    if sol.status not in ("optimal", "near_optimal"):
        raise SosError(f"cannot verify a non-optimal solution "
                       f"({sol.status})")
    rng = np.random.default_rng(seed)
    report = {"constraints": {}, "multipliers": {}, "passed": True}
    for m in sol.info.mult_order:
        eig = float(np.linalg.eigvalsh(
            0.5 * (sol.grams[m.name] + sol.grams[m.name].T))[0])
        entry = {"min_eig": eig, "passed": bool(eig >= -eig_tol)}
        report["multipliers"][m.name] = entry
        report["passed"] &= entry["passed"]
    for (name, expr), basis in zip(prog.constraints, sol.info.block_bases):
        gram = sol.grams[name]
        achieved = expr.value(sol.values, sol.mult_values)
        nb = len(basis)
        eigs = np.linalg.eigvalsh(0.5 * (gram + gram.T))
        recon = {}
        for p in range(nb):
            for q in range(nb):
                mono = tuple(a + b for a, b in zip(basis[p], basis[q]))
                recon[mono] = recon.get(mono, 0.0) + gram[p, q]
        monos = set(recon) | set(achieved.terms)
        coeff_scale = 1.0 + max((abs(c) for c in achieved.terms.values()),
                                default=0.0)
        coeff_resid = max(abs(recon.get(mo, 0.0)
                              - achieved.terms.get(mo, 0.0))
                          for mo in monos) / coeff_scale
        pts = rng.uniform(-1.0, 1.0, (n_points, len(expr.vars)))
        vals = achieved.eval_matrix(pts)
        basis_vals = np.ones((n_points, nb))
        for k, expo in enumerate(basis):
            for d, e in enumerate(expo):
                if e:
                    basis_vals[:, k] *= pts[:, d]**e
        point_slack = float(np.max(np.abs(np.einsum(
            "pi,ij,pj->p", basis_vals, gram, basis_vals) - vals)))
        entry = {"min_eig": float(eigs[0]),
                 "coeff_residual": float(coeff_resid),
                 "pointwise_residual": point_slack,
                 "passed": bool(eigs[0] >= -eig_tol
                                and coeff_resid <= coeff_tol)}
        report["constraints"][name] = entry
        report["passed"] &= entry["passed"]
    return report
