"""Sparse SDPA (.dat-s) export and import.

The interchange format lets any external SDPA-compatible solver
cross-check results from the internal interior-point solver.  The file
encodes the standard pair

    (P) min c.x  s.t.  X = sum_i x_i F_i - F_0 >= 0
    (D) max <F_0, Y>  s.t.  <F_i, Y> = c_i,  Y >= 0

our problem ``min <C, X> s.t. <A_i, X> + (B f)_i = b_i`` maps onto (D)
with F_0 = -C, F_i = A_i, c = b; its optimum is the negative of (D)'s.
Free variables are split into a nonnegative difference pair carried in
an extra diagonal block.
"""

from __future__ import annotations

import numpy as np

from .sdp import SdpProblem

_ENTRY_TOL = 0.0  # write exact nonzeros only


class SdpaError(ValueError):
    pass


def write_sdpa(prob: SdpProblem, path, comment: str = "") -> None:
    nf = prob.n_free
    sizes = list(prob.block_sizes)
    if nf:
        sizes.append(-2 * nf)           # diagonal block for f = f+ - f-
    lines = []
    if comment:
        for row in comment.splitlines():
            lines.append(f'"{row}"')
    lines.append(f"{prob.m}")
    lines.append(f"{len(sizes)}")
    lines.append(" ".join(str(s) for s in sizes))
    lines.append(" ".join(repr(float(v)) for v in prob.b))

    def emit(matno, blkno, mat, diag_only=False):
        n = mat.shape[0]
        for i in range(n):
            for j in (range(i, i + 1) if diag_only else range(i, n)):
                v = float(mat[i, j])
                if v != _ENTRY_TOL:
                    lines.append(f"{matno} {blkno} {i + 1} {j + 1} {v!r}")

    free_blk = len(sizes)
    # F_0 = -C (and -c_free split over the diagonal pair block)
    for jj, c in prob.c_blocks.items():
        emit(0, jj + 1, -np.asarray(c, dtype=float))
    for k, v in enumerate(prob.c_free):
        if v != 0.0:
            v = float(v)
            lines.append(f"0 {free_blk} {2 * k + 1} {2 * k + 1} {-v!r}")
            lines.append(f"0 {free_blk} {2 * k + 2} {2 * k + 2} {v!r}")
    # F_i = A_i with the free-variable coefficients on the split diagonal
    for i, row in enumerate(prob.a_blocks):
        for jj, mat in row.items():
            emit(i + 1, jj + 1, np.asarray(mat, dtype=float))
        for k in range(nf):
            v = float(prob.b_free[i, k])
            if v != 0.0:
                lines.append(f"{i + 1} {free_blk} {2 * k + 1} {2 * k + 1} "
                             f"{v!r}")
                lines.append(f"{i + 1} {free_blk} {2 * k + 2} {2 * k + 2} "
                             f"{-v!r}")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def read_sdpa(path) -> SdpProblem:
    """Read a .dat-s file back into problem form.

    Diagonal blocks (negative sizes) are densified; the free-variable
    split is not reconstructed, so a round trip through this reader
    yields an equivalent all-PSD formulation rather than the original
    free-variable one.
    """
    header = []
    entries = []
    with open(path) as fh:
        for raw in fh:
            line = raw.strip()
            if not line or line.startswith(('"', "*")):
                continue
            if len(header) < 4:
                header.append(line)
            else:
                entries.append(line)
    if len(header) < 4:
        raise SdpaError(f"{path}: truncated header")
    try:
        m = int(header[0].split()[0])
        nblk = int(header[1].split()[0])
        sizes = [int(tok.strip("(),{}")) for tok in header[2].replace(
            ",", " ").split()]
        b = np.array([float(tok) for tok in header[3].replace(
            ",", " ").split()])
    except ValueError as exc:
        raise SdpaError(f"{path}: malformed header: {exc}") from None
    if len(sizes) != nblk or b.size != m:
        raise SdpaError(f"{path}: header counts disagree with data")
    dense = [abs(s) for s in sizes]
    f0 = [np.zeros((n, n)) for n in dense]
    mats = [[np.zeros((n, n)) for n in dense] for _ in range(m)]
    for line in entries:
        toks = line.split()
        if len(toks) != 5:
            raise SdpaError(f"{path}: bad entry line {line!r}")
        matno, blk, i, j = (int(t) for t in toks[:4])
        val = float(toks[4])
        if not (0 <= matno <= m and 1 <= blk <= nblk):
            raise SdpaError(f"{path}: entry indices out of range: {line!r}")
        n = dense[blk - 1]
        if not (1 <= i <= n and 1 <= j <= n):
            raise SdpaError(f"{path}: matrix index out of range: {line!r}")
        target = f0[blk - 1] if matno == 0 else mats[matno - 1][blk - 1]
        target[i - 1, j - 1] = val
        target[j - 1, i - 1] = val
    c_blocks = {jj: -mat for jj, mat in enumerate(f0) if np.any(mat)}
    a_blocks = [{jj: mat for jj, mat in enumerate(row) if np.any(mat)}
                for row in mats]
    return SdpProblem(block_sizes=dense, c_blocks=c_blocks,
                      a_blocks=a_blocks, b=b)
