"""Local spectral problems and the multiscale test space.

On each coarse block ``K_i`` we solve ``K x = mu M x`` with the Neumann
stiffness of ``a_i`` and report ``lambda = H**2 * mu``.  The lowest ``L``
modes, normalised in ``L2(K_i)``, form the columns of the test matrix ``Phi``.
"""
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp

from .assembly import assemble_block

DEFAULT_L = 4
ZERO_RTOL = 1e-9
CLUSTER_RTOL = 1e-8


class EigenSolverError(RuntimeError):
    pass


@dataclass(frozen=True)
class BlockSpectralBasis:
    block: int
    eigenvalues: np.ndarray  # lowest L+1 (at least), ascending, dimensionless
    modes: np.ndarray  # (dofs_per_block, L), L2(K_i)-orthonormal
    lambda_max: float

    @property
    def n_modes(self):
        return self.modes.shape[1]

    @property
    def excluded_next(self):
        return float(self.eigenvalues[self.n_modes])

    def reported_eigenvalues(self):
        lam = self.eigenvalues.copy()
        lam[np.abs(lam) < ZERO_RTOL * self.lambda_max] = 0.0
        return lam


def _sign_normalize(v):
    scale = np.max(np.abs(v))
    if scale == 0:
        return v
    first = np.flatnonzero(np.abs(v) > 1e-8 * scale)[0]
    return v if v[first] > 0 else -v


def _lex_key(v):
    scale = np.max(np.abs(v)) or 1.0
    return tuple(np.round(v / scale, 8))


def _canonical_cluster(Q, M):
    """Deterministic M-orthonormal basis of span(Q).

    Pivot rows come from column-pivoted QR of ``Q.T`` (invariant under
    orthogonal mixing of ``Q``), the basis that interpolates the unit vectors
    at the pivots is Gram-Schmidt orthonormalised, sign-normalised and sorted
    lexicographically.
    """
    k = Q.shape[1]
    _, _, piv = sla.qr(Q.T, pivoting=True, mode="economic")
    B = Q @ np.linalg.inv(Q[piv[:k], :])
    out = []
    for j in range(k):
        v = B[:, j].copy()
        for u in out:
            v -= (u @ (M @ v)) * u
        v /= np.sqrt(v @ (M @ v))
        out.append(_sign_normalize(v))
    out.sort(key=_lex_key)
    return np.column_stack(out)


def solve_block_eigen(K, M, H, L, block=0, extra=4):
    """Lowest ``L`` modes of ``K x = mu M x`` with ``lambda = H**2 mu``.

    ``K`` and ``M`` are the block stiffness and mass (sparse or dense).
    Degenerate eigenspaces are given a canonical basis, see ``_canonical_cluster``.
    """
    K = K.toarray() if sp.issparse(K) else np.asarray(K, float)
    M = M.toarray() if sp.issparse(M) else np.asarray(M, float)
    n = K.shape[0]
    if L < 1 or L >= n:
        raise ValueError(f"requested L={L} modes on a block with {n} dofs; need 1 <= L < {n}")
    top = min(n - 1, L + extra)
    try:
        w, V = sla.eigh(K, M, subset_by_index=[0, top])
        wmax = sla.eigh(K, M, eigvals_only=True, subset_by_index=[n - 1, n - 1])[0]
    except (sla.LinAlgError, ValueError) as exc:
        raise EigenSolverError(f"block {block}: generalized eigensolve failed: {exc}") from exc
    lam = H * H * w
    lam_max = H * H * wmax
    tol = CLUSTER_RTOL * max(1.0, abs(lam[-1]))

    # canonicalise clusters that touch the selected modes
    modes = V.copy()
    start = 0
    while start < L:
        stop = start + 1
        while stop <= top and lam[stop] - lam[stop - 1] <= tol:
            stop += 1
        if stop - start > 1:
            modes[:, start:stop] = _canonical_cluster(V[:, start:stop], M)
        else:
            modes[:, start] = _sign_normalize(V[:, start])
        start = stop
    return BlockSpectralBasis(block=block, eigenvalues=lam, modes=modes[:, :L],
                              lambda_max=float(lam_max))


@dataclass(frozen=True)
class TestSpace:
    Phi: sp.csc_matrix  # (ndofs, ncols)
    MPhi: sp.csc_matrix
    Lambda: float
    column_ranges: tuple  # per block (start, stop)
    bases: tuple  # BlockSpectralBasis per block

    @property
    def n_coarse(self):
        return self.Phi.shape[1]

    def block_columns(self, blocks):
        return np.concatenate([np.arange(*self.column_ranges[b]) for b in blocks])


def build_test_space(mesh, bases, M):
    """Assemble ``Phi`` from per-block modes (extended by zero) and ``Lambda``."""
    by_block = {b.block: b for b in bases}
    missing = sorted(set(range(mesh.n_blocks)) - set(by_block))
    if missing:
        raise ValueError(f"missing spectral basis for blocks {missing[:10]}")
    rows, cols, vals, ranges = [], [], [], []
    col = 0
    for i in range(mesh.n_blocks):
        b = by_block[i]
        dofs = mesh.block_dofs[i]
        L = b.n_modes
        rows.append(np.repeat(dofs, L))
        cols.append(np.tile(np.arange(col, col + L), len(dofs)))
        vals.append(b.modes.ravel())
        ranges.append((col, col + L))
        col += L
    Phi = sp.csc_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                        shape=(mesh.n_dofs, col))
    Phi.sort_indices()
    MPhi = sp.csc_matrix(M @ Phi)
    Lam = min(by_block[i].excluded_next for i in range(mesh.n_blocks))
    return TestSpace(Phi=Phi, MPhi=MPhi, Lambda=float(Lam), column_ranges=tuple(ranges),
                     bases=tuple(by_block[i] for i in range(mesh.n_blocks)))


def build_spectral_basis(mesh, field, M, L=DEFAULT_L, threads=1):
    """Solve every block's eigenproblem and assemble the test space."""
    def one(i):
        K, Mb = assemble_block(mesh, field, i)
        return solve_block_eigen(K, Mb, mesh.H, L, block=i)

    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            bases = list(pool.map(one, range(mesh.n_blocks)))
    else:
        bases = [one(i) for i in range(mesh.n_blocks)]
    return build_test_space(mesh, bases, M)


def project_pi(test_space, v):
    """L2 projection onto the test space: coefficients ``Phi^T M v`` and ``Phi c``."""
    c = test_space.MPhi.T @ np.asarray(v, float)
    return c, test_space.Phi @ c


def write_eigenvalue_csv(path, test_space):
    lines = ["block,j,lambda"]
    for b in test_space.bases:
        lam = b.reported_eigenvalues()
        for j in range(b.n_modes + 1):
            lines.append(f"{b.block},{j + 1},{float(lam[j])!r}")
    Path(path).write_text("\n".join(lines) + "\n")
