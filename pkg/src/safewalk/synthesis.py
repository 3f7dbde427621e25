"""Barrier synthesis for the reduced walking model.

Searches for a piecewise polynomial barrier v (one degree-4 piece per
interval of the phase variable theta) together with a polynomial
shaping-input controller u_s so that the set {v >= 0}:

  1. excludes the unsafe set,
  2. does not shrink across the stance-leg reset,
  3. flows inward under u_s even against the certified dynamics
     approximation error, and
  4. only commands inputs inside the realizable input box.

The nonconvex (v, u_s) search runs by alternation: phase A fixes the
controller and maximizes the box integral of v; phase B fixes the
barrier and re-optimizes the controller for a uniform decrease margin.
Every accepted iterate is independently re-verified at the Gram-matrix
level; synthesis never emits a certificate that failed verification.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .approx import VARS, VARS_PAIR, PolynomialBundle
from .polynomial import Polynomial, fit_least_squares
from .sos import (PolyExpr, SosProgram, decision_polynomial, solve_program,
                  verify_solution)

PAIR_REDUCED = ("theta_dot", "alpha", "alpha_dot", "theta_dot_post")
NONTHETA = ("theta_dot", "alpha", "alpha_dot")


class SynthesisError(RuntimeError):
    pass


@dataclass(frozen=True)
class SynthesisConfig:
    n_pieces: int = 4
    barrier_degree: int = 4
    controller_degree: int = 1
    lambda_degree: int = 2
    q_degree: int = 2
    multiplier_degree: int = 2
    max_alternations: int = 16
    stagnation_rtol: float = 1e-3
    sdp_tol: float = 1e-7
    sdp_max_iter: int = 200
    eig_tol: float = 1e-6
    coeff_tol: float = 1e-6
    trace_penalty: float = 1e-7
    margin_cap: float = 1.0
    margin_floor: float = 20.0
    anchor_level: float = 0.1
    n_anchors: int = 8
    seed: int = 20260826

    def __post_init__(self):
        if self.n_pieces < 1:
            raise SynthesisError("need at least one theta piece")
        if self.barrier_degree % 2 or self.barrier_degree < 2:
            raise SynthesisError("barrier degree must be even and >= 2")
        if self.max_alternations < 1:
            raise SynthesisError("need at least one alternation round")


def _even_floor(n: int) -> int:
    return max(0, n - (n % 2))


def _normalized(p: Polynomial) -> Polynomial:
    scale = max((abs(c) for c in p.terms.values()), default=0.0)
    return p * (1.0 / scale) if scale > 0 else p


def _unit_moment(expo) -> float:
    out = 1.0
    for e in expo:
        if e % 2:
            return 0.0
        out *= 2.0 / (e + 1)
    return out


def _mdeg(config: SynthesisConfig, target: int, factor_deg: int) -> int:
    return min(config.multiplier_degree,
               _even_floor(max(target - factor_deg, 0)))


@dataclass
class PieceData:
    """Dynamics and set data for one theta interval, pulled back onto
    the unit box [-1, 1]^4."""

    index: int
    box: dict
    half: dict
    f: tuple
    g: tuple
    e: tuple
    u_lo: Polynomial
    u_hi: Polynomial
    unsafe: tuple          # (name, scaled polys) per unsafe piece
    relax: tuple           # (name, poly) for single-inequality pieces
    unit: tuple            # 1 - z_v^2 per coordinate

    @property
    def volume(self) -> float:
        out = 1.0
        for v in VARS:
            out *= 2.0 * self.half[v]
        return out


def prepare_pieces(bundle: PolynomialBundle, n_pieces: int) -> list:
    th_lo, th_hi = bundle.box["theta"]
    edges = np.linspace(th_lo, th_hi, n_pieces + 1)
    pieces = []
    for i in range(n_pieces):
        box = dict(bundle.box)
        box["theta"] = (float(edges[i]), float(edges[i + 1]))
        half = {v: 0.5 * (box[v][1] - box[v][0]) for v in VARS}
        f = tuple(bundle.f_p[k].rescale(box) * (1.0 / half[VARS[k]])
                  for k in range(4))
        g = tuple(bundle.g_p[k].rescale(box) * (1.0 / half[VARS[k]])
                  for k in range(4))
        e = tuple(bundle.e_p[k].rescale(box) * (1.0 / half[VARS[k]])
                  for k in range(4))
        unsafe = []
        relax = []
        for piece in bundle.unsafe.pieces:
            polys = tuple(_normalized(q.in_vars(VARS).rescale(box))
                          for q in piece.polys)
            unsafe.append((piece.name, polys))
            if len(polys) == 1:
                relax.append((piece.name, polys[0]))
        unit = tuple(1.0 - Polynomial.variable(VARS, v)**2 for v in VARS)
        pieces.append(PieceData(
            index=i, box=box, half=half, f=f, g=g, e=e,
            u_lo=bundle.bounds.u_min.rescale(box),
            u_hi=bundle.bounds.u_max.rescale(box),
            unsafe=tuple(unsafe), relax=tuple(relax), unit=unit))
    return pieces


def _box_terms(prog: SosProgram, tag: str, piece: PieceData,
               config: SynthesisConfig, target: int):
    """Sum of tau_v * (1 - z_v^2) to subtract (domain localization)."""
    total = PolyExpr.wrap(VARS, 0.0)
    for k, v in enumerate(VARS):
        deg = _mdeg(config, target, 2)
        total = total + prog.multiplier(f"{tag}:box:{v}", VARS, deg) \
            * piece.unit[k]
    return total


def _relax_terms(prog: SosProgram, tag: str, piece: PieceData,
                 config: SynthesisConfig, target: int):
    """Sum of sigma * h over single-inequality unsafe pieces to add
    (slack inside the unsafe union, where the condition is vacuous)."""
    total = PolyExpr.wrap(VARS, 0.0)
    for name, h in piece.relax:
        deg = _mdeg(config, target, h.total_degree)
        total = total + prog.multiplier(f"{tag}:relax:{name}", VARS, deg) * h
    return total


def build_constraint_1(prog: SosProgram, piece: PieceData, v,
                       config: SynthesisConfig):
    """Barrier nonpositive on every unsafe piece (within the box)."""
    v = PolyExpr.wrap(VARS, v)
    target = config.barrier_degree
    for name, polys in piece.unsafe:
        tag = f"p{piece.index}:c1:{name}"
        expr = -v
        for k, h in enumerate(polys):
            deg = _mdeg(config, target, h.total_degree)
            expr = expr - prog.multiplier(f"{tag}:h{k}", VARS, deg) * h
        expr = expr - _box_terms(prog, tag, piece, config, target)
        prog.require_sos(tag, expr)


def build_constraint_2(prog: SosProgram, bundle: PolynomialBundle,
                       pieces: list, v_first, v_last,
                       config: SynthesisConfig):
    """Barrier does not decrease across the reset: the pre-state lives
    on the guard surface (theta at its maximum) in the last piece, the
    post-state lands at minimum theta in the first piece.

    The exact-equality rows of the reset relation are substituted away,
    leaving four variables: the pre-impact velocities and shaping
    coordinates plus the post-impact theta rate."""
    th_lo, th_hi = bundle.box["theta"]
    rvars = PAIR_REDUCED
    mapping = {
        "theta": th_hi,
        "theta_post": th_lo,
        "alpha_post": Polynomial.variable(rvars, "alpha"),
        "alpha_dot_post": Polynomial.variable(rvars, "alpha_dot"),
    }
    domain = []
    for poly in bundle.h_R.polys + bundle.h_S.polys:
        sub = poly.substitute(mapping).in_vars(rvars)
        if sub.total_degree == 0:
            val = sub.terms.get((0,) * 4, 0.0)
            if val < -1e-9:
                raise SynthesisError(
                    "guard/reset data excludes the reset surface "
                    f"substitution (constant row {val})")
            continue   # vacuously nonnegative row
        domain.append(_normalized(sub))

    # barrier pieces on the reset surface
    first, last = pieces[0], pieces[-1]

    def slice_sub(piece, theta_value, rate_var):
        c = {v: 0.5 * (piece.box[v][0] + piece.box[v][1]) for v in VARS}
        m = {"theta": (theta_value - c["theta"]) / piece.half["theta"]}
        for v in ("alpha", "alpha_dot"):
            m[v] = (Polynomial.variable(rvars, v) - c[v]) \
                * (1.0 / piece.half[v])
        m["theta_dot"] = (Polynomial.variable(rvars, rate_var)
                          - c["theta_dot"]) * (1.0 / piece.half["theta_dot"])
        return m

    v_minus = PolyExpr.wrap(VARS, v_last).substitute(
        slice_sub(last, th_hi, "theta_dot"))
    v_plus = PolyExpr.wrap(VARS, v_first).substitute(
        slice_sub(first, th_lo, "theta_dot_post"))
    expr = PolyExpr.wrap(rvars, v_plus) - PolyExpr.wrap(rvars, v_minus)

    target = config.barrier_degree
    for k, r in enumerate(domain):
        deg = _mdeg(config, target, r.total_degree)
        expr = expr - prog.multiplier(f"c2:dom{k}", rvars, deg) * r
    ranges = {"theta_dot": bundle.box["theta_dot"],
              "alpha": bundle.box["alpha"],
              "alpha_dot": bundle.box["alpha_dot"],
              "theta_dot_post": bundle.box["theta_dot"]}
    for v in rvars:
        lo, hi = ranges[v]
        x = Polynomial.variable(rvars, v)
        loc = (x - lo) * (hi - x) * (4.0 / (hi - lo) ** 2)
        expr = expr - prog.multiplier(f"c2:box:{v}", rvars,
                                      _mdeg(config, target, 2)) * loc
    prog.require_sos("c2:reset", expr)


def build_constraint_3(prog: SosProgram, piece: PieceData, v, u, lam, q,
                       config: SynthesisConfig, gamma=None):
    """Inward flow: the barrier derivative under the controller beats
    the certified approximation error (bounded per row by q), relaxed
    inside the unsafe union and localized to the box.  ``q`` maps
    dynamics rows to their bound polynomials (rows with a zero error
    bound are omitted)."""
    v = PolyExpr.wrap(VARS, v)
    u = PolyExpr.wrap(VARS, u)
    lam = PolyExpr.wrap(VARS, lam)
    tag = f"p{piece.index}:c3"
    lie = PolyExpr.wrap(VARS, 0.0)
    for k in range(4):
        lie = lie + v.diff(VARS[k]) * (PolyExpr.wrap(VARS, piece.f[k])
                                       + PolyExpr.wrap(VARS, piece.g[k]) * u)
    main = lie + v * lam
    for j, q_j in q.items():
        main = main - PolyExpr.wrap(VARS, q_j)
    if gamma is not None:
        main = main - gamma
    target = max(main.degree(), config.barrier_degree)
    main = main + _relax_terms(prog, f"{tag}:main", piece, config, target)
    main = main - _box_terms(prog, f"{tag}:main", piece, config, target)
    prog.require_sos(f"{tag}:main", main)

    for j, q_j in q.items():
        dv_e = v.diff(VARS[j]) * piece.e[j]
        for sign, label in ((-1.0, "lo"), (1.0, "hi")):
            comp = PolyExpr.wrap(VARS, q_j) + sign * dv_e
            ctag = f"{tag}:q{j}:{label}"
            ctarget = max(comp.degree(), config.barrier_degree)
            comp = comp + _relax_terms(prog, ctag, piece, config, ctarget)
            comp = comp - _box_terms(prog, ctag, piece, config, ctarget)
            prog.require_sos(ctag, comp)


def build_constraint_4(prog: SosProgram, piece: PieceData, u,
                       config: SynthesisConfig):
    """Controller inside the realizable input box wherever the state is
    not already unsafe."""
    u = PolyExpr.wrap(VARS, u)
    target = max(piece.u_lo.total_degree, piece.u_hi.total_degree,
                 config.barrier_degree)
    for expr0, label in ((u - piece.u_lo, "lo"), ((-u) + piece.u_hi, "hi")):
        tag = f"p{piece.index}:c4:{label}"
        expr = expr0 + _relax_terms(prog, tag, piece, config, target)
        expr = expr - _box_terms(prog, tag, piece, config, target)
        prog.require_sos(tag, expr)


def objective_and_constraint_5(prog: SosProgram, pieces: list, v_exprs: list,
                               config: SynthesisConfig) -> dict:
    """Box-integral objective (to minimize: the negative integral) and
    the cap v <= 1 keeping the barrier a soft indicator."""
    objective = {}
    for piece, v in zip(pieces, v_exprs):
        tag = f"p{piece.index}:c5"
        expr = PolyExpr.wrap(VARS, 1.0) - v
        expr = expr - _box_terms(prog, tag, piece, config,
                                 config.barrier_degree)
        prog.require_sos(tag, expr)
        weight = piece.volume / 16.0
        for name, poly in v.lin.items():
            contrib = sum(c * _unit_moment(expo)
                          for expo, c in poly.terms.items())
            if contrib:
                objective[name] = objective.get(name, 0.0) \
                    - weight * contrib
    return objective


def reset_rate(bundle: PolynomialBundle) -> Polynomial:
    """Executable post-impact rate map recovered from the inflated
    reset-relation rows (the midpoint of the two one-sided bounds on
    the post rate)."""
    tdp = tuple(1 if v == "theta_dot_post" else 0 for v in VARS_PAIR)
    plus = minus = None
    for p in bundle.h_R.polys:
        q = p.in_vars(VARS_PAIR)
        c = q.terms.get(tdp, 0.0)
        if c > 0:
            plus = q * (1.0 / c)
        elif c < 0:
            minus = q * (1.0 / abs(c))
    if plus is None or minus is None:
        raise SynthesisError(
            "reset relation lacks the two one-sided post-rate rows")
    mid = (plus - minus) * 0.5   # theta_dot_post - rho(theta_dot, ...)
    rho = mid.substitute({"theta_dot_post": 0.0}) * (-1.0)
    keep = [rho.vars.index(v) for v in VARS]
    terms = {}
    for expo, coef in rho.terms.items():
        for v, e in zip(rho.vars, expo):
            if v.endswith("_post") and e:
                raise SynthesisError(
                    "post-rate rows involve post variables other than "
                    "the rate itself")
        new = tuple(expo[k] for k in keep)
        terms[new] = terms.get(new, 0.0) + coef
    return Polynomial(VARS, terms)


def simulate_labels(bundle: PolynomialBundle, points: np.ndarray,
                    kp: float = 4.0, kd: float = 3.0, n_strides: int = 3,
                    dt: float = 0.01, max_steps: int = 4000) -> np.ndarray:
    """Forward-simulate the nominal polynomial dynamics under a clipped
    shaping-coordinate PD law, returning True for start states that
    complete ``n_strides`` resets without leaving the working box,
    touching the unsafe set, or losing input feasibility."""
    rho = reset_rate(bundle)
    th_lo, th_hi = bundle.box["theta"]
    lo = np.array([bundle.box[v][0] for v in VARS])
    hi = np.array([bundle.box[v][1] for v in VARS])

    def control(x):
        u_lo, u_hi = bundle.bounds.interval(x)
        bad = u_lo > u_hi
        u = np.clip(-kp * x[:, 2] - kd * x[:, 3], u_lo, u_hi)
        return u, bad

    def deriv(x):
        u, bad = control(x)
        out = np.column_stack(
            [bundle.f_p[k].eval_matrix(x)
             + bundle.g_p[k].eval_matrix(x) * u for k in range(4)])
        return out, bad

    x = np.array(points, dtype=float)
    n = x.shape[0]
    strides = np.zeros(n, dtype=int)
    doomed = bundle.unsafe.contains(x)
    active = ~doomed
    for _ in range(max_steps):
        if not active.any():
            break
        xa = x[active]
        k1, bad = deriv(xa)
        k2, _ = deriv(xa + 0.5 * dt * k1)
        k3, _ = deriv(xa + 0.5 * dt * k2)
        k4, _ = deriv(xa + dt * k3)
        xn = xa + (dt / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)

        crossed = xn[:, 0] >= th_hi
        if crossed.any():
            post = xn[crossed]
            rate = rho.eval_matrix(post)
            post[:, 0] = th_lo
            post[:, 1] = rate
            xn[crossed] = post
        out = np.any((xn < lo) | (xn > hi), axis=1)
        unsafe = bundle.unsafe.contains(xn)
        fail = bad | out | unsafe

        idx = np.flatnonzero(active)
        x[idx] = xn
        strides[idx[crossed]] += 1
        doomed[idx[fail]] = True
        done = strides[idx] >= n_strides
        active[idx[fail | done]] = False
    doomed[active] = True   # ran out the horizon without finishing
    return ~doomed


def seed_barrier(bundle: PolynomialBundle, pieces: list,
                 config: SynthesisConfig, kp: float = 4.0, kd: float = 3.0,
                 n_samples: int = 1500, n_strides: int = 3,
                 dt: float = 0.01, max_steps: int = 4000,
                 level: float = 0.7) -> list:
    """Per-piece least-squares barrier seed fitted to simulated
    viable / doomed labels (+level on viable starts, -level on doomed
    ones) in unit coordinates.  Only a warm start: every accepted
    barrier afterwards comes from a verified convex program."""
    rng = np.random.default_rng(config.seed)
    seeds = []
    for piece in pieces:
        pts = np.column_stack([rng.uniform(*piece.box[v], n_samples)
                               for v in VARS])
        viable = simulate_labels(bundle, pts, kp=kp, kd=kd,
                                 n_strides=n_strides, dt=dt,
                                 max_steps=max_steps)
        target = np.where(viable, level, -level)
        center = np.array([0.5 * (piece.box[v][0] + piece.box[v][1])
                           for v in VARS])
        halves = np.array([piece.half[v] for v in VARS])
        unit = (pts - center) / halves
        poly, _, _ = fit_least_squares(unit, target, VARS,
                                       config.barrier_degree)
        seeds.append(poly)
    return seeds


def nominal_anchors(bundle: PolynomialBundle, pieces: list,
                    config: SynthesisConfig, kp: float = 4.0,
                    kd: float = 3.0, dt: float = 0.01,
                    n_settle: int = 6, max_steps: int = 4000) -> list:
    """States on the settled nominal stride, as (piece index, unit
    point) pairs.  The barrier is pinned positive there so the
    alternation cannot drift toward an empty certified set."""
    rho = reset_rate(bundle)
    th_lo, th_hi = bundle.box["theta"]
    rates = np.linspace(bundle.box["theta_dot"][0],
                        bundle.box["theta_dot"][1], 41)[1:-1]
    starts = np.column_stack([np.full(39, th_lo), rates,
                              np.zeros(39), np.zeros(39)])
    viable = simulate_labels(bundle, starts, kp=kp, kd=kd,
                             n_strides=n_settle, dt=dt,
                             max_steps=max_steps)
    if not viable.any():
        raise SynthesisError(
            "no sampled start completes the settling strides; cannot "
            "anchor the barrier to a nominal orbit")
    x = starts[np.flatnonzero(viable)[viable.sum() // 2]].copy()

    def step(x, record=None):
        def deriv(z):
            pt = z[None, :]
            u_lo, u_hi = bundle.bounds.interval(pt)
            u = np.clip(-kp * z[2] - kd * z[3], u_lo[0], u_hi[0])
            return np.array([bundle.f_p[k].eval_matrix(pt)[0]
                             + bundle.g_p[k].eval_matrix(pt)[0] * u
                             for k in range(4)])
        k1 = deriv(x)
        k2 = deriv(x + 0.5 * dt * k1)
        k3 = deriv(x + 0.5 * dt * k2)
        k4 = deriv(x + dt * k3)
        xn = x + (dt / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
        if xn[0] >= th_hi:
            xn[1] = rho.eval_matrix(xn[None, :])[0]
            xn[0] = th_lo
            return xn, True
        return xn, False

    # settle, then record one full stride
    strides = 0
    for _ in range(max_steps):
        x, crossed = step(x)
        strides += crossed
        if strides >= n_settle:
            break
    else:
        raise SynthesisError("nominal orbit failed to settle")
    path = [x.copy()]
    for _ in range(max_steps):
        x, crossed = step(x)
        if crossed:
            break
        path.append(x.copy())
    path = np.array(path)
    idx = np.linspace(0, len(path) - 1, config.n_anchors).astype(int)
    anchors = []
    for pt in path[idx]:
        pi = min(int((pt[0] - th_lo) / (th_hi - th_lo) * len(pieces)),
                 len(pieces) - 1)
        piece = pieces[pi]
        center = np.array([0.5 * (piece.box[v][0] + piece.box[v][1])
                           for v in VARS])
        halves = np.array([piece.half[v] for v in VARS])
        anchors.append((pi, (pt - center) / halves))
    return anchors


def _containment_slice(v_left, v_right):
    """Both barriers restricted to the shared theta boundary, expressed
    over the (shared) non-theta unit coordinates."""
    def at_theta(v, z_theta):
        mapping = {"theta": float(z_theta)}
        for name in NONTHETA:
            mapping[name] = Polynomial.variable(NONTHETA, name)
        return PolyExpr.wrap(VARS, v).substitute(mapping)
    return at_theta(v_left, 1.0), at_theta(v_right, -1.0)


def _require_containment(prog: SosProgram, i: int, v_left, v_right,
                         config: SynthesisConfig):
    """Linear (sigma = 1) containment: at the shared boundary the next
    piece's barrier dominates, so the certified set flows on."""
    left, right = _containment_slice(v_left, v_right)
    expr = right - left
    for name in NONTHETA:
        z = Polynomial.variable(NONTHETA, name)
        expr = expr - prog.multiplier(f"stitch{i}:box:{name}", NONTHETA,
                                      _mdeg(config, config.barrier_degree,
                                            2)) * (1.0 - z**2)
    prog.require_sos(f"stitch{i}", expr)


@dataclass
class ViabilityCertificate:
    """Piecewise barrier and controller in per-piece unit coordinates,
    plus everything needed to re-verify and to evaluate online."""

    theta_edges: np.ndarray
    boxes: list
    v_unit: list
    u_unit: list
    lam_unit: list
    q_unit: list           # dict row -> Polynomial per piece
    box: dict
    config: SynthesisConfig
    history: list = field(default_factory=list)
    verification: dict = field(default_factory=dict)
    provenance: dict = field(default_factory=dict)

    @property
    def n_pieces(self) -> int:
        return len(self.v_unit)

    def piece_index(self, theta):
        idx = np.searchsorted(self.theta_edges, np.asarray(theta), "right") - 1
        return np.clip(idx, 0, self.n_pieces - 1)

    def _units(self, points, idx):
        box = self.boxes[idx]
        center = np.array([0.5 * (box[v][0] + box[v][1]) for v in VARS])
        halves = np.array([0.5 * (box[v][1] - box[v][0]) for v in VARS])
        return (points - center) / halves

    def _eval(self, polys, points):
        points = np.atleast_2d(np.asarray(points, dtype=float))
        idx = self.piece_index(points[:, 0])
        out = np.empty(points.shape[0])
        for i in range(self.n_pieces):
            mask = idx == i
            if mask.any():
                out[mask] = polys[i].eval_matrix(
                    self._units(points[mask], i))
        return out

    def barrier(self, points) -> np.ndarray:
        return self._eval(self.v_unit, points)

    def control(self, points) -> np.ndarray:
        return self._eval(self.u_unit, points)

    def in_box(self, points, margin: float = 0.0) -> np.ndarray:
        points = np.atleast_2d(np.asarray(points, dtype=float))
        ok = np.ones(points.shape[0], dtype=bool)
        for k, v in enumerate(VARS):
            lo, hi = self.box[v]
            ok &= (points[:, k] >= lo - margin) & (points[:, k] <= hi + margin)
        return ok

    def contains(self, points, level: float = 0.0) -> np.ndarray:
        points = np.atleast_2d(np.asarray(points, dtype=float))
        return self.in_box(points) & (self.barrier(points) >= level)

    def integral(self) -> float:
        total = 0.0
        for i, v in enumerate(self.v_unit):
            box = self.boxes[i]
            vol = 1.0
            for name in VARS:
                vol *= box[name][1] - box[name][0]
            total += (vol / 16.0) * sum(
                c * _unit_moment(expo) for expo, c in v.terms.items())
        return total

    def save(self, path):
        import json
        from dataclasses import asdict

        def poly(p):
            return {"vars": list(p.vars),
                    "terms": [[list(expo), float(c)]
                              for expo, c in sorted(p.terms.items())]}

        payload = {
            "format": "viability-certificate/1",
            "theta_edges": [float(t) for t in self.theta_edges],
            "boxes": [{k: [float(a), float(b)] for k, (a, b) in bx.items()}
                      for bx in self.boxes],
            "box": {k: [float(a), float(b)] for k, (a, b) in self.box.items()},
            "v_unit": [poly(p) for p in self.v_unit],
            "u_unit": [poly(p) for p in self.u_unit],
            "lam_unit": [poly(p) for p in self.lam_unit],
            "q_unit": [{str(j): poly(p) for j, p in q.items()}
                       for q in self.q_unit],
            "config": asdict(self.config),
            "history": self.history,
            "verification_summary": _verification_summary(self.verification),
            "provenance": self.provenance,
        }
        with open(path, "w") as fh:
            json.dump(payload, fh, indent=1, default=float)

    @classmethod
    def load(cls, path) -> "ViabilityCertificate":
        import json
        with open(path) as fh:
            payload = json.load(fh)
        if payload.get("format") != "viability-certificate/1":
            raise SynthesisError(f"{path}: not a viability certificate file")

        def poly(d):
            return Polynomial(tuple(d["vars"]),
                              {tuple(expo): c for expo, c in d["terms"]})

        return cls(
            theta_edges=np.array(payload["theta_edges"]),
            boxes=[{k: tuple(v) for k, v in bx.items()}
                   for bx in payload["boxes"]],
            v_unit=[poly(d) for d in payload["v_unit"]],
            u_unit=[poly(d) for d in payload["u_unit"]],
            lam_unit=[poly(d) for d in payload["lam_unit"]],
            q_unit=[{int(j): poly(d) for j, d in q.items()}
                    for q in payload["q_unit"]],
            box={k: tuple(v) for k, v in payload["box"].items()},
            config=SynthesisConfig(**payload["config"]),
            history=payload.get("history", []),
            verification=payload.get("verification_summary", {}),
            provenance=payload.get("provenance", {}))


def _verification_summary(verification: dict) -> dict:
    """Scalar digest of the Gram-level verification reports (full Gram
    matrices are not persisted)."""
    out = {}
    pa = verification.get("phase_a")
    if pa and "constraints" not in pa:      # already summarized
        out["phase_a"] = dict(pa)
    elif pa:
        out["phase_a"] = {
            "passed": bool(pa["passed"]),
            "worst_min_eig": min(
                e["min_eig"] for e in pa["constraints"].values()),
            "worst_coeff_residual": max(
                e["coeff_residual"] for e in pa["constraints"].values()),
        }
    pb = verification.get("phase_b")
    if pb:
        out["phase_b"] = [
            None if r is None
            else dict(r) if "constraints" not in r else {
                "passed": bool(r["passed"]),
                "worst_min_eig": min(
                    e["min_eig"] for e in r["constraints"].values()),
                "worst_coeff_residual": max(
                    e["coeff_residual"] for e in r["constraints"].values()),
            } for r in pb]
    for key, value in verification.items():
        if key not in ("phase_a", "phase_b"):
            out[key] = value
    return out


def _phase_a(bundle, pieces, u_list, lam_list, config, feasibility=False,
             anchors=()):
    """Barrier phase.  In feasibility mode the decrease condition gets a
    per-piece scalar slack (maximized, may be negative) so the
    alternation can climb toward a strictly certifiable pair; in volume
    mode the slack is pinned to zero and the box integral is maximized.
    Anchor points (on the nominal orbit) keep the certified set
    nonempty in both modes."""
    prog = SosProgram()
    v_exprs = []
    q_exprs = []
    gamma_names = []
    for piece in pieces:
        v, _ = decision_polynomial(f"p{piece.index}:v", VARS,
                                   config.barrier_degree)
        v_exprs.append(v)
        q = {}
        for j in range(4):
            if piece.e[j].is_zero():
                continue
            q[j], _ = decision_polynomial(f"p{piece.index}:q{j}", VARS,
                                          config.q_degree)
        q_exprs.append(q)
    gamma = None
    if feasibility:
        # one shared slack: maximize the worst-piece margin, so no piece
        # can be sacrificed to cap another
        gamma, _ = decision_polynomial("margin", VARS, 0)
        gamma_names.append("margin[0]")
        prog.require_sos("margin-floor", gamma + config.margin_floor)
        prog.require_sos("margin-cap",
                         PolyExpr.wrap(VARS, config.margin_cap) - gamma)
    for piece, v, q in zip(pieces, v_exprs, q_exprs):
        build_constraint_1(prog, piece, v, config)
        build_constraint_3(prog, piece, v, u_list[piece.index],
                           lam_list[piece.index], q, config, gamma=gamma)
    for i in range(len(pieces) - 1):
        _require_containment(prog, i, v_exprs[i], v_exprs[i + 1], config)
    build_constraint_2(prog, bundle, pieces, v_exprs[0], v_exprs[-1], config)
    for k, (pi, zu) in enumerate(anchors):
        mapping = {name: float(zu[j]) for j, name in enumerate(VARS)}
        prog.require_sos(f"anchor{k}",
                         v_exprs[pi].substitute(mapping)
                         - config.anchor_level)
    volume_obj = objective_and_constraint_5(prog, pieces, v_exprs, config)
    if feasibility:
        prog.objective = {name: -1.0 for name in gamma_names}
    else:
        prog.objective = volume_obj
    sol = solve_program(prog, tol=config.sdp_tol,
                        max_iter=config.sdp_max_iter,
                        trace_penalty=config.trace_penalty)
    return prog, sol, v_exprs, q_exprs, gamma_names


def _phase_b(piece, v_poly, config):
    prog = SosProgram()
    u, _ = decision_polynomial(f"p{piece.index}:u", VARS,
                               config.controller_degree)
    lam, _ = decision_polynomial(f"p{piece.index}:lam", VARS,
                                 config.lambda_degree)
    q = {}
    for j in range(4):
        if piece.e[j].is_zero():
            continue
        q[j], _ = decision_polynomial(f"p{piece.index}:q{j}", VARS,
                                      config.q_degree)
    gamma, _ = decision_polynomial(f"p{piece.index}:margin", VARS, 0)
    build_constraint_3(prog, piece, v_poly, u, lam, q, config,
                       gamma=gamma)
    build_constraint_4(prog, piece, u, config)
    # The margin may go negative early on (the fixed barrier is only a
    # heuristic seed); phase A restores feasibility with the barrier free.
    prog.require_sos(f"p{piece.index}:margin-floor",
                     gamma + config.margin_floor)
    prog.require_sos(f"p{piece.index}:margin-cap",
                     PolyExpr.wrap(VARS, config.margin_cap) - gamma)
    name = f"p{piece.index}:margin[0]"
    prog.objective = {name: -1.0}
    sol = solve_program(prog, tol=config.sdp_tol,
                        max_iter=config.sdp_max_iter,
                        trace_penalty=config.trace_penalty)
    return prog, sol, u, lam, name


def alternate(bundle: PolynomialBundle,
              config: SynthesisConfig = SynthesisConfig(),
              log=None) -> ViabilityCertificate:
    """Alternating synthesis; returns a certificate whose final barrier
    and controller were each verified at the Gram level, or raises
    ``SynthesisError`` when even the seeded program is infeasible."""
    def say(msg):
        if log:
            log(msg)

    pieces = prepare_pieces(bundle, config.n_pieces)
    seed_v = seed_barrier(bundle, pieces, config)
    anchors = nominal_anchors(bundle, pieces, config)
    history = []
    verification = {}
    v_current = list(seed_v)
    v_list = None
    q_list = None
    u_list = [None] * len(pieces)
    lam_list = [None] * len(pieces)
    stall = 0
    prev_obj = None
    prev_margin = None
    last_mode = None
    for it in range(config.max_alternations):
        verification.setdefault("phase_b", [None] * len(pieces))
        margins = []
        for piece in pieces:
            progb, solb, u_expr, lam_expr, gname = _phase_b(
                piece, v_current[piece.index], config)
            bentry = {"iteration": it, "phase": "B",
                      "piece": piece.index, "status": solb.status}
            if solb.status in ("optimal", "near_optimal"):
                reportb = verify_solution(
                    progb, solb, eig_tol=config.eig_tol,
                    coeff_tol=config.coeff_tol)
                bentry["verified"] = reportb["passed"]
                bentry["margin"] = solb.values.get(gname)
                if reportb["passed"]:
                    u_list[piece.index] = u_expr.value(solb.values)
                    lam_list[piece.index] = lam_expr.value(solb.values)
                    verification["phase_b"][piece.index] = reportb
                    margins.append(bentry["margin"])
                    say(f"phase B iteration {it} piece {piece.index}: "
                        f"margin {bentry['margin']:.3e}")
            if not bentry.get("verified"):
                if u_list[piece.index] is None:
                    raise SynthesisError(
                        f"piece {piece.index}: controller program against "
                        f"the seeded barrier not solvable ({solb.status})")
                margins.append(-np.inf)
                say(f"phase B iteration {it} piece {piece.index}: "
                    f"{solb.status}; keeping previous controller")
            history.append(bentry)

        feasibility = min(margins) < 0.0
        prog, sol, v_exprs, q_exprs, gamma_names = _phase_a(
            bundle, pieces, u_list, lam_list, config,
            feasibility=feasibility, anchors=anchors)
        mode = "margin" if feasibility else "volume"
        entry = {"iteration": it, "phase": "A", "mode": mode,
                 "status": sol.status, "sdp_iterations": sol.sdp.iterations}
        if sol.status not in ("optimal", "near_optimal"):
            history.append(entry)
            if v_list is None and it == config.max_alternations - 1:
                raise SynthesisError(
                    f"barrier phase not solvable: {sol.status}")
            say(f"phase A iteration {it} ({mode}): {sol.status}; "
                "keeping previous barrier")
            if v_list is not None:
                break
            continue
        report = verify_solution(prog, sol, eig_tol=config.eig_tol,
                                 coeff_tol=config.coeff_tol)
        entry["verified"] = report["passed"]
        if not report["passed"]:
            history.append(entry)
            say(f"phase A iteration {it} ({mode}): verification failed; "
                "keeping previous barrier")
            if v_list is not None:
                break
            continue
        new_v = [v.value(sol.values) for v in v_exprs]
        new_q = [{j: q_j.value(sol.values) for j, q_j in q.items()}
                 for q in q_exprs]
        v_current = new_v
        obj = -sum(coef * sol.values[name]
                   for name, coef in prog.objective.items())
        entry["objective"] = obj
        history.append(entry)
        if mode != last_mode:
            stall = 0
        last_mode = mode
        if feasibility:
            say(f"phase A iteration {it} (margin): total margin {obj:.4f} "
                f"({sol.sdp.iterations} solver iterations)")
            if prev_margin is not None and \
                    obj < prev_margin + config.stagnation_rtol:
                stall += 1
            else:
                stall = 0
            prev_margin = obj
            if stall >= 2 and v_list is None:
                raise SynthesisError(
                    "alternation stalled before reaching a nonnegative "
                    f"decrease margin (best total margin {obj:.4f})")
            if stall >= 2:
                break
        else:
            v_list = new_v
            q_list = new_q
            verification["phase_a"] = report
            say(f"phase A iteration {it} (volume): objective {obj:.6f} "
                f"({sol.sdp.iterations} solver iterations)")
            if prev_obj is not None:
                if abs(obj - prev_obj) < config.stagnation_rtol \
                        * (1 + abs(obj)):
                    stall += 1
                else:
                    stall = 0
            prev_obj = obj
            if stall >= 2:
                break

    if v_list is None:
        raise SynthesisError(
            "alternation never produced a verified barrier with a "
            "nonnegative decrease margin; increase max_alternations or "
            "refine the seed")
    th_lo, th_hi = bundle.box["theta"]
    return ViabilityCertificate(
        theta_edges=np.linspace(th_lo, th_hi, config.n_pieces + 1),
        boxes=[p.box for p in pieces],
        v_unit=v_list, u_unit=list(u_list), lam_unit=list(lam_list),
        q_unit=q_list, box=dict(bundle.box), config=config,
        history=history, verification=verification)


def stitch_pieces(cert: ViabilityCertificate, n_random: int = 100000,
                  seed: int = 0) -> dict:
    """Re-verify inter-piece containment with a fresh SoS multiplier
    program per interior boundary, plus a random sampling gate: slice
    states certified by one piece stay certified by the next."""
    config = cert.config
    rng = np.random.default_rng(seed)
    report = {"boundaries": [], "passed": True}
    for i in range(cert.n_pieces - 1):
        left, right = _containment_slice(cert.v_unit[i], cert.v_unit[i + 1])
        prog = SosProgram()
        sigma = prog.multiplier("sigma", NONTHETA,
                                _even_floor(config.multiplier_degree))
        expr = PolyExpr.wrap(NONTHETA, right) - sigma * left.const
        for name in NONTHETA:
            z = Polynomial.variable(NONTHETA, name)
            expr = expr - prog.multiplier(f"box:{name}", NONTHETA, 2) \
                * (1.0 - z**2)
        prog.require_sos("containment", expr)
        sol = solve_program(prog, tol=config.sdp_tol,
                            max_iter=config.sdp_max_iter,
                            trace_penalty=config.trace_penalty)
        ok = sol.status in ("optimal", "near_optimal") and verify_solution(
            prog, sol, eig_tol=config.eig_tol,
            coeff_tol=config.coeff_tol)["passed"]

        pts = rng.uniform(-1.0, 1.0, (n_random, 3))
        lvals = left.const.eval_matrix(pts)
        rvals = right.const.eval_matrix(pts)
        escapes = int(np.sum((lvals >= 0) & (rvals < -1e-9)))
        entry = {"boundary": i, "sos_verified": bool(ok),
                 "sample_escapes": escapes}
        entry["passed"] = bool(ok and escapes == 0)
        report["boundaries"].append(entry)
        report["passed"] &= entry["passed"]
    return report
