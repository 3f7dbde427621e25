"""Primal-dual interior-point solver for block-diagonal semidefinite
programs with free variables.

Problem form (primal / dual):

    min  sum_j <C_j, X_j> + c_f . f      max  b . y
    s.t. sum_j <A_ij, X_j> + (B f)_i = b_i    C_j - sum_i y_i A_ij = S_j >= 0
         X_j >= 0, f free                     B' y = c_f

The solver uses Nesterov-Todd scaling with a Mehrotra
predictor-corrector step and reports honest statuses: an "optimal"
result always carries primal/dual/gap residuals that a caller can
re-check independently.  No external SDP library is involved; dense
linear algebra comes from numpy.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

DEFAULT_TOL = 1e-8
MAX_ITER = 100


class SdpError(RuntimeError):
    pass


@dataclass
class SdpProblem:
    """Block-diagonal SDP with optional free (unconstrained) variables.

    block_sizes: list of n_j; constraints: for row i, ``a_blocks[i]`` is
    a dict {block index: symmetric (n_j, n_j) array}; ``b`` the
    right-hand side; ``c_blocks`` dict {block index: C_j}; ``b_free``
    the (m, n_f) coefficient matrix of free variables (may be empty);
    ``c_free`` their objective coefficients.
    """

    block_sizes: list
    c_blocks: dict
    a_blocks: list
    b: np.ndarray
    b_free: np.ndarray = None
    c_free: np.ndarray = None

    def __post_init__(self):
        self.b = np.asarray(self.b, dtype=float)
        m = self.b.size
        if self.b_free is None:
            self.b_free = np.zeros((m, 0))
        self.b_free = np.asarray(self.b_free, dtype=float).reshape(m, -1)
        if self.c_free is None:
            self.c_free = np.zeros(self.b_free.shape[1])
        self.c_free = np.asarray(self.c_free, dtype=float)
        if len(self.a_blocks) != m:
            raise SdpError("constraint count mismatch")
        for j, n in enumerate(self.block_sizes):
            for i, row in enumerate(self.a_blocks):
                if j in row and row[j].shape != (n, n):
                    raise SdpError(f"A[{i}][{j}] has wrong shape")
        for i, row in enumerate(self.a_blocks):
            for j, mat in row.items():
                if not np.allclose(mat, mat.T, atol=1e-12):
                    raise SdpError(f"A[{i}][{j}] is not symmetric")
        for j, mat in self.c_blocks.items():
            n = self.block_sizes[j]
            if mat.shape != (n, n):
                raise SdpError(f"C[{j}] has wrong shape")
            if not np.allclose(mat, mat.T, atol=1e-12):
                raise SdpError(f"C[{j}] is not symmetric")

    @property
    def n_free(self) -> int:
        return self.b_free.shape[1]

    @property
    def m(self) -> int:
        return self.b.size

    def c_block(self, j):
        n = self.block_sizes[j]
        return self.c_blocks.get(j, np.zeros((n, n)))


@dataclass
class SdpSolution:
    status: str
    x_blocks: list = None
    s_blocks: list = None
    y: np.ndarray = None
    f: np.ndarray = None
    primal_objective: float = np.nan
    dual_objective: float = np.nan
    residuals: dict = field(default_factory=dict)
    iterations: int = 0


def _sym(a):
    return 0.5 * (a + a.T)


def _min_eig(a):
    return float(np.linalg.eigvalsh(_sym(a))[0])


def _mat_power(a, p):
    w, v = np.linalg.eigh(_sym(a))
    w = np.maximum(w, 0.0)
    return (v * w**p) @ v.T


def _nt_scaling(x, s):
    """W with W S W = X (Nesterov-Todd); returns (W, W^{1/2} ... ) pieces
    actually used: W and its symmetric square root inverse products are
    not needed explicitly -- we return W and G with W = G G'."""
    s_half = _mat_power(s, 0.5)
    inner = _mat_power(s_half @ x @ s_half, 0.5)
    s_half_inv = _mat_power(s, -0.5)
    w = _sym(s_half_inv @ inner @ s_half_inv)
    return w


def _max_step(x, dx, cap=1.0):
    """Largest t <= cap with x + t dx >= 0 (x > 0)."""
    # generalized eigenvalue bound: t_max = -1 / lambda_min(L^-1 dx L^-T)
    ell = np.linalg.cholesky(_sym(x) + 1e-300 * np.eye(x.shape[0]))
    inv = np.linalg.solve(ell, np.linalg.solve(ell, _sym(dx)).T).T
    lam = float(np.linalg.eigvalsh(_sym(inv))[0])
    if lam >= 0:
        return cap
    return min(cap, -1.0 / lam)


class _BlockOps:
    """Per-block stacked constraint matrices so A, A*, and the Schur
    complement are dense matrix products instead of Python loops."""

    def __init__(self, prob):
        self.m = prob.m
        self.sizes = list(prob.block_sizes)
        self.rows = []
        self.amat = []
        for j, n in enumerate(self.sizes):
            idx = [i for i, row in enumerate(prob.a_blocks) if j in row]
            self.rows.append(np.asarray(idx, dtype=int))
            stack = np.zeros((len(idx), n * n))
            for k, i in enumerate(idx):
                stack[k] = prob.a_blocks[i][j].ravel()
            self.amat.append(stack)

    def apply_a(self, x_blocks):
        out = np.zeros(self.m)
        for j in range(len(self.sizes)):
            if self.rows[j].size:
                out[self.rows[j]] += self.amat[j] @ x_blocks[j].ravel()
        return out

    def apply_at(self, y):
        out = []
        for j, n in enumerate(self.sizes):
            if self.rows[j].size:
                out.append((y[self.rows[j]] @ self.amat[j]).reshape(n, n))
            else:
                out.append(np.zeros((n, n)))
        return out

    def schur(self, w):
        mmat = np.zeros((self.m, self.m))
        for j, n in enumerate(self.sizes):
            idx = self.rows[j]
            if not idx.size:
                continue
            a3 = self.amat[j].reshape(-1, n, n)
            waw = np.einsum("ab,rbc,cd->rad", w[j], a3, w[j],
                            optimize=True).reshape(-1, n * n)
            mmat[np.ix_(idx, idx)] += self.amat[j] @ waw.T
        return mmat

    def accumulate_rhs(self, rhs, mats):
        """rhs_i += sum_j <A_ij, mats[j]> in place."""
        for j in range(len(self.sizes)):
            if self.rows[j].size:
                rhs[self.rows[j]] += self.amat[j] @ mats[j].ravel()


def _apply_a(prob, x_blocks):
    out = np.empty(prob.m)
    for i, row in enumerate(prob.a_blocks):
        out[i] = sum(np.tensordot(mat, x_blocks[j]) for j, mat in row.items())
    return out


def _apply_at(prob, y):
    out = []
    for j, n in enumerate(prob.block_sizes):
        acc = np.zeros((n, n))
        for i, row in enumerate(prob.a_blocks):
            if j in row:
                acc += y[i] * row[j]
        out.append(acc)
    return out


def solve_sdp(prob: SdpProblem, tol: float = DEFAULT_TOL,
              max_iter: int = MAX_ITER) -> SdpSolution:
    """Solve the SDP; status is "optimal" only when primal, dual, and
    gap residuals are all below tol (relative).  Otherwise the status
    reports what happened ("max_iterations", "numerical_failure",
    "primal_infeasible_suspected", "dual_infeasible_suspected")."""
    m = prob.m
    nf = prob.n_free
    sizes = list(prob.block_sizes)
    nb = len(sizes)
    dim = sum(sizes)
    if dim == 0:
        raise SdpError("problem has no cone blocks")
    ops = _BlockOps(prob)

    # identity start
    x = [np.eye(n) for n in sizes]
    s = [np.eye(n) for n in sizes]
    y = np.zeros(m)
    f = np.zeros(nf)
    # scale the start to the data magnitude
    data_scale = max(1.0, float(np.max(np.abs(prob.b), initial=0.0)))
    x = [data_scale * xi for xi in x]

    b_norm = 1.0 + float(np.linalg.norm(prob.b))
    c_norm = 1.0 + max((float(np.linalg.norm(prob.c_block(j)))
                        for j in range(nb)), default=0.0)

    status = "max_iterations"
    it = 0
    for it in range(1, max_iter + 1):
        # residuals
        rp = prob.b - ops.apply_a(x) - prob.b_free @ f
        at_y = ops.apply_at(y)
        rd = [prob.c_block(j) - at_y[j] - s[j] for j in range(nb)]
        rf = prob.c_free - prob.b_free.T @ y
        mu = sum(np.tensordot(x[j], s[j]) for j in range(nb)) / dim

        p_res = float(np.linalg.norm(rp)) / b_norm
        d_res = max(max((float(np.linalg.norm(rd[j])) for j in range(nb)),
                        default=0.0),
                    float(np.linalg.norm(rf, ord=np.inf)
                          if rf.size else 0.0)) / c_norm
        p_obj = (sum(np.tensordot(prob.c_block(j), x[j]) for j in range(nb))
                 + prob.c_free @ f)
        d_obj = float(prob.b @ y)
        gap = abs(p_obj - d_obj) / (1.0 + abs(p_obj) + abs(d_obj))

        if p_res < tol and d_res < tol and gap < tol:
            status = "optimal"
            break

        # divergence heuristics
        x_norm = max(float(np.linalg.norm(xi)) for xi in x)
        s_norm = max(float(np.linalg.norm(si)) for si in s)
        if x_norm > 1e12 * data_scale and p_res < 1e-6:
            status = "dual_infeasible_suspected"
            break
        if (s_norm > 1e12 or float(np.linalg.norm(y)) > 1e12) and d_res < 1e-6:
            status = "primal_infeasible_suspected"
            break

        try:
            w = [_nt_scaling(x[j], s[j]) for j in range(nb)]
            # Schur complement M = A W (.) W A' over blocks; factor the
            # (augmented) KKT matrix once, reuse for both directions
            schur = ops.schur(w)
            if nf:
                kkt = np.block([[schur, prob.b_free],
                                [prob.b_free.T, np.zeros((nf, nf))]])
            else:
                kkt = schur
            kkt[np.diag_indices_from(kkt)] += 1e-13
            lu_piv = scipy.linalg.lu_factor(kkt, check_finite=False)

            def solve_newton(rp_, rd_, rf_, rmu):
                # eliminate dS = rd - A'(dy), dX = rmu - W dS W:
                # A(W A'(dy) W) + B df = rp - A(rmu) + A(W rd W)
                rhs = rp_.copy()
                ops.accumulate_rhs(
                    rhs, [w[j] @ rd_[j] @ w[j] - rmu[j] for j in range(nb)])
                if nf:
                    sol = scipy.linalg.lu_solve(
                        lu_piv, np.concatenate([rhs, rf_]),
                        check_finite=False)
                    dy, df = sol[:m], sol[m:]
                else:
                    dy = scipy.linalg.lu_solve(lu_piv, rhs,
                                               check_finite=False)
                    df = np.zeros(0)
                at_dy = ops.apply_at(dy)
                ds = [rd_[j] - at_dy[j] for j in range(nb)]
                dx = [_sym(rmu[j] - w[j] @ ds[j] @ w[j]) for j in range(nb)]
                return dx, dy, df, ds

            # predictor (affine) direction
            rmu_aff = [-x[j] for j in range(nb)]
            # W-scaled complementarity: dX + W dS W = -X  (target mu = 0)
            dxa, dya, dfa, dsa = solve_newton(rp, rd, rf, rmu_aff)
            ap = min(_max_step(x[j], dxa[j]) for j in range(nb))
            ad = min(_max_step(s[j], dsa[j]) for j in range(nb))
            mu_aff = sum(np.tensordot(x[j] + ap * dxa[j], s[j] + ad * dsa[j])
                         for j in range(nb)) / dim
            sigma = min(1.0, max(0.0, (mu_aff / mu)))**3

            # corrector: recentre toward sigma * mu
            rmu = [_sym(-x[j] + sigma * mu * np.linalg.inv(s[j]))
                   for j in range(nb)]
            dx, dy, df, ds = solve_newton(rp, rd, rf, rmu)
        except np.linalg.LinAlgError:
            status = "numerical_failure"
            break

        frac = 0.98
        ap = frac * min(_max_step(x[j], dx[j]) for j in range(nb))
        ad = frac * min(_max_step(s[j], ds[j]) for j in range(nb))
        ap = min(ap, 1.0)
        ad = min(ad, 1.0)
        if ap < 1e-10 and ad < 1e-10:
            status = "numerical_failure"
            break
        for j in range(nb):
            x[j] = _sym(x[j] + ap * dx[j])
            s[j] = _sym(s[j] + ad * ds[j])
        y = y + ad * dy
        f = f + ap * df

    rp = prob.b - ops.apply_a(x) - prob.b_free @ f
    at_y = ops.apply_at(y)
    rd = [prob.c_block(j) - at_y[j] - s[j] for j in range(nb)]
    rf = prob.c_free - prob.b_free.T @ y
    p_obj = (sum(np.tensordot(prob.c_block(j), x[j]) for j in range(nb))
             + prob.c_free @ f)
    d_obj = float(prob.b @ y)
    residuals = {
        "primal": float(np.linalg.norm(rp)) / b_norm,
        "dual": max(max((float(np.linalg.norm(rd[j])) for j in range(nb)),
                        default=0.0),
                    float(np.linalg.norm(rf, ord=np.inf)
                          if rf.size else 0.0)) / c_norm,
        "gap": abs(p_obj - d_obj) / (1.0 + abs(p_obj) + abs(d_obj)),
        "min_eig_x": min(_min_eig(x[j]) for j in range(nb)),
        "min_eig_s": min(_min_eig(s[j]) for j in range(nb)),
    }
    return SdpSolution(status=status, x_blocks=x, s_blocks=s, y=y, f=f,
                       primal_objective=float(p_obj),
                       dual_objective=d_obj,
                       residuals=residuals, iterations=it)
