"""Constraint energy minimizing trial functions.

For every test mode ``phi_j`` of block ``K_i`` the trial function ``psi_{j,m}``
minimises ``a_DG(psi, psi)`` over functions supported in the oversampled
region ``K_{i,m}`` subject to ``Phi^T M psi = e_(i,j)`` on that region.  The
saddle point system

    [A_R  B^T] [psi]   [0]
    [B    0  ] [mu ] = [e]

is solved with a sparse LU factorisation (no penalty regularisation).
"""
import math
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .grid import oversample_region
from .spectral import TestSpace

BASIS_MAGIC = b"CEMWBAS1"
GLOBAL_M = 0xFFFFFFFF
TABLE1_SCHEDULE = {8: 4, 16: 6, 32: 7, 64: 8}


class SingularKKTError(RuntimeError):
    def __init__(self, block, m, n_constraints, detail=""):
        self.block, self.m, self.n_constraints = block, m, n_constraints
        super().__init__(f"singular KKT system for block {block}, m={m}, "
                         f"{n_constraints} constraints{': ' + detail if detail else ''}")


def m_schedule(H, mode="formula"):
    """Oversampling layers for coarse size ``H``.

    ``"formula"`` rounds ``4*log(1/H)/log(8)`` to nearest with ties up;
    ``"table1"`` returns the published (m, H) pairs for H = 1/8 ... 1/64.
    """
    nc = round(1.0 / H)
    if mode == "table1":
        if nc not in TABLE1_SCHEDULE:
            raise ValueError(f"no tabulated m for H=1/{nc}")
        return TABLE1_SCHEDULE[nc]
    if mode != "formula":
        raise ValueError(f"unknown m schedule {mode!r}")
    return int(math.floor(4.0 * math.log(nc) / math.log(8.0) + 0.5))


@dataclass
class MultiscaleBasis:
    test_space: TestSpace
    Psi: sp.csc_matrix
    m: int | None  # None for the global (unlocalised) basis
    coarse_stiffness: sp.csr_matrix | None = None
    multipliers: list = field(default_factory=list, repr=False)

    @property
    def Phi(self):
        return self.test_space.Phi

    @property
    def Lambda(self):
        return self.test_space.Lambda

    @property
    def n_coarse(self):
        return self.Psi.shape[1]


class _KKTCache:
    """Keeps the last factorisation; saturated regions share one KKT matrix."""

    def __init__(self):
        self.key = None
        self.value = None


def _factor(K, block, m, n_constraints, static):
    # static diagonal pivoting keeps the fill-reducing order intact and is an
    # order of magnitude faster on these systems; partial pivoting is the fallback
    try:
        return spla.splu(K, permc_spec="MMD_AT_PLUS_A", diag_pivot_thresh=0.0 if static else 1.0)
    except RuntimeError as exc:
        if static:
            return None
        raise SingularKKTError(block, m, n_constraints, str(exc)) from exc


def _region_kkt(A, test_space, region, block, m, cache=None):
    key = tuple(region.member_blocks)
    if cache is not None and cache.key == key:
        return cache.value
    dofs = region.dofs
    cols = test_space.block_columns(region.member_blocks)
    A_R = A[dofs][:, dofs]
    B = test_space.MPhi[dofs][:, cols].T
    K = sp.bmat([[A_R, B.T], [B, None]], format="csc")
    value = [_factor(K, block, m, len(cols), True), cols, len(dofs), B, K]
    if cache is not None:
        cache.key, cache.value = key, value
    return value


def _kkt_solve(kkt, rhs, block, m):
    lu, cols, n, B, K = kkt
    for attempt in range(2):
        if lu is not None:
            sol = lu.solve(rhs)
            if np.all(np.isfinite(sol)):
                res = np.abs(K @ sol - rhs).max()
                scale = abs(K).max() * np.abs(sol).max() + 1.0
                if res <= 1e-10 * scale and np.abs(B @ sol[:n] - rhs[n:]).max() <= 1e-6:
                    return sol
        if attempt == 0:
            lu = kkt[0] = _factor(K, block, m, len(cols), False)
    raise SingularKKTError(block, m, len(cols), "constraints not satisfied")


def solve_cem_block(mesh, A, test_space, block, m, cache=None, keep_multipliers=False):
    """Localized trial functions of one block.

    Returns ``(region, psi, mu)`` with ``psi`` of shape ``(len(region.dofs), L_i)``
    over the region dofs; ``mu`` is ``None`` unless requested.
    """
    region = oversample_region(mesh, block, mesh.nc if m is None else m)
    kkt = _region_kkt(A, test_space, region, block, m, cache)
    cols, n = kkt[1], kkt[2]
    own = np.arange(*test_space.column_ranges[block])
    rhs = np.zeros((n + len(cols), len(own)))
    rhs[n + np.searchsorted(cols, own), np.arange(len(own))] = 1.0
    sol = _kkt_solve(kkt, rhs, block, m)
    mu = sol[n:] if keep_multipliers else None
    return region, sol[:n], mu


def build_multiscale_basis(mesh, A, test_space, m, threads=1, coarse_operator=True,
                           keep_multipliers=False):
    """Localized basis ``Psi`` for all blocks (``m=None`` gives the global basis).

    ``Psi`` is written straight into preallocated CSC arrays, so peak memory
    stays close to the size of the final matrix.
    """
    layers = mesh.nc if m is None else m
    sizes = np.array([len(oversample_region(mesh, i, layers).dofs) for i in range(mesh.n_blocks)],
                     dtype=np.int64)
    ncols = np.array([b - a for a, b in test_space.column_ranges], dtype=np.int64)
    indptr = np.zeros(test_space.n_coarse + 1, dtype=np.int64)
    indptr[1:] = np.cumsum(np.repeat(sizes, ncols))
    idx_dtype = np.int32 if indptr[-1] < 2 ** 31 and mesh.n_dofs < 2 ** 31 else np.int64
    indices = np.empty(indptr[-1], dtype=idx_dtype)
    data = np.empty(indptr[-1])
    mus = []

    def store(i, result):
        region, psi, mu = result
        start = indptr[test_space.column_ranges[i][0]]
        n = len(region.dofs)
        for j in range(psi.shape[1]):
            indices[start + j * n:start + (j + 1) * n] = region.dofs
            data[start + j * n:start + (j + 1) * n] = psi[:, j]
        if keep_multipliers:
            mus.append(mu)

    if threads > 1:
        def one(i):
            return solve_cem_block(mesh, A, test_space, i, m, None, keep_multipliers)
        with ThreadPoolExecutor(threads) as pool:
            for i, result in enumerate(pool.map(one, range(mesh.n_blocks))):
                store(i, result)
    else:
        cache = _KKTCache()
        for i in range(mesh.n_blocks):
            store(i, solve_cem_block(mesh, A, test_space, i, m, cache, keep_multipliers))

    Psi = sp.csc_matrix((data, indices, indptr), shape=(mesh.n_dofs, test_space.n_coarse))
    basis = MultiscaleBasis(test_space, Psi, m, multipliers=mus)
    if coarse_operator:
        basis.coarse_stiffness = build_coarse_operator(Psi, A)
    return basis


def solve_global_basis(mesh, A, test_space, max_dofs=200_000, **kwargs):
    if mesh.n_dofs > max_dofs:
        raise ValueError(f"global basis needs a {mesh.n_dofs}-dof KKT solve, above the cap {max_dofs}")
    return build_multiscale_basis(mesh, A, test_space, None, **kwargs)


def build_coarse_operator(Psi, A, chunk=512):
    """``Psi^T A Psi`` assembled in column chunks, exactly symmetric."""
    Psi = sp.csc_matrix(Psi)
    n = Psi.shape[1]
    PsiT = Psi.T.tocsr()
    blocks = []
    for s in range(0, n, chunk):
        blocks.append(sp.csc_matrix(PsiT @ (A @ Psi[:, s:s + chunk])))
    K = sp.hstack(blocks, format="csr")
    K = (0.5 * (K + K.T)).tocsr()
    K.sort_indices()
    return K


def localization_error(Psi_global, Psi_local, N):
    """Per-column ``||psi_j - psi_{j,m}||_a`` with the a-norm matrix ``N``."""
    if Psi_global.shape != Psi_local.shape:
        raise ValueError(f"basis shapes differ: {Psi_global.shape} vs {Psi_local.shape}")
    D = sp.csc_matrix(Psi_global - Psi_local)
    sq = np.asarray((D.multiply(N @ D)).sum(axis=0)).ravel()
    return np.sqrt(np.maximum(sq, 0.0))


def save_basis(path, basis, mesh, chunk=256):
    """Binary basis file: magic, dims, Phi and Psi (dense, column-major float64), Lambda, m."""
    n, k = basis.Phi.shape
    m = GLOBAL_M if basis.m is None else basis.m
    with open(path, "wb") as fh:
        fh.write(BASIS_MAGIC)
        fh.write(struct.pack("<IIII", n, k, mesh.nc, mesh.nf_per_block))
        for mat in (sp.csc_matrix(basis.Phi), sp.csc_matrix(basis.Psi)):
            # column chunks keep the dense copy small
            for s in range(0, k, chunk):
                dense = mat[:, s:s + chunk].toarray()
                fh.write(np.asarray(dense, dtype="<f8").tobytes(order="F"))
        fh.write(struct.pack("<dI", basis.Lambda, m))


def load_basis(path, mesh, A, M, coarse_operator=True):
    data = Path(path).read_bytes()
    if data[:8] != BASIS_MAGIC:
        raise ValueError(f"{path}: not a basis file (bad magic)")
    n, k, nc, nf = struct.unpack("<IIII", data[8:24])
    if (nc, nf) != (mesh.nc, mesh.nf_per_block) or n != mesh.n_dofs:
        raise ValueError(f"{path}: basis built for nc={nc}, nf={nf}, not the configured mesh")
    off = 24
    size = n * k * 8
    Phi = np.frombuffer(data[off:off + size], dtype="<f8").reshape((n, k), order="F")
    Psi = np.frombuffer(data[off + size:off + 2 * size], dtype="<f8").reshape((n, k), order="F")
    Lam, m = struct.unpack("<dI", data[off + 2 * size:off + 2 * size + 12])
    Phi = sp.csc_matrix(Phi)
    Psi = sp.csc_matrix(Psi)
    L = k // mesh.n_blocks
    ranges = tuple((b * L, (b + 1) * L) for b in range(mesh.n_blocks))
    ts = TestSpace(Phi=Phi, MPhi=sp.csc_matrix(M @ Phi), Lambda=Lam, column_ranges=ranges, bases=())
    basis = MultiscaleBasis(ts, Psi, None if m == GLOBAL_M else m)
    if coarse_operator:
        basis.coarse_stiffness = build_coarse_operator(Psi, A)
    return basis
