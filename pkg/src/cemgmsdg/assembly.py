"""Fine-scale operators on the broken Q1 space: mass, block stiffness, IPDG and a-norm.

All matrices are ``scipy.sparse.csr_matrix`` in the global dof numbering of
:mod:`cemgmsdg.grid`.  Coefficients are piecewise constant per fine cell, so
bulk integrals are exact with the reference element matrices, and edge
integrals (products of linear traces along a fine segment) are exact with
two-point Gauss quadrature.
"""
import warnings
from pathlib import Path

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp

from .medium import block_maxima

DEFAULT_GAMMA = 4.0

GAUSS2_POINTS = np.array([0.5 - 0.5 / np.sqrt(3.0), 0.5 + 0.5 / np.sqrt(3.0)])
GAUSS2_WEIGHTS = np.array([0.5, 0.5])

# Q1 reference matrices, nodes counterclockwise from the lower-left corner.
# The stiffness of a square cell is independent of its size in 2D.
Q1_STIFFNESS = np.array([[4.0, -1.0, -2.0, -1.0],
                         [-1.0, 4.0, -1.0, -2.0],
                         [-2.0, -1.0, 4.0, -1.0],
                         [-1.0, -2.0, -1.0, 4.0]]) / 6.0
Q1_MASS_UNIT = np.array([[4.0, 2.0, 1.0, 2.0],
                         [2.0, 4.0, 2.0, 1.0],
                         [1.0, 2.0, 4.0, 2.0],
                         [2.0, 1.0, 2.0, 4.0]]) / 36.0


def q1_shape(xi, eta):
    xi, eta = np.asarray(xi, float), np.asarray(eta, float)
    return np.stack([(1 - xi) * (1 - eta), xi * (1 - eta), xi * eta, (1 - xi) * eta], axis=-1)


def q1_grad_ref(xi, eta):
    """Reference gradients, shape ``(..., 4, 2)``."""
    xi, eta = np.asarray(xi, float), np.asarray(eta, float)
    dxi = np.stack([-(1 - eta), 1 - eta, eta, -eta], axis=-1)
    deta = np.stack([-(1 - xi), -xi, xi, 1 - xi], axis=-1)
    return np.stack([dxi, deta], axis=-1)


def edge_quadrature(length, *traces):
    """Integrate the product of linear traces over a segment.

    Each trace is given by its values ``(start, end)``.  Two-point Gauss is
    exact up to cubic integrands, i.e. products of up to three linear traces.
    """
    t = GAUSS2_POINTS
    prod = np.ones_like(t)
    for a, b in traces:
        prod = prod * ((1 - t) * a + t * b)
    return float(length * np.dot(GAUSS2_WEIGHTS, prod))


def _face_points(face):
    t = GAUSS2_POINTS
    if face == "right":
        return np.ones_like(t), t
    if face == "left":
        return np.zeros_like(t), t
    if face == "top":
        return t, np.ones_like(t)
    if face == "bottom":
        return t, np.zeros_like(t)
    raise ValueError(face)


def _face_traces(face, normal, h):
    """Trace values and normal derivatives of the 4 cell shape functions at the Gauss points."""
    xi, eta = _face_points(face)
    T = q1_shape(xi, eta)
    G = q1_grad_ref(xi, eta) @ np.asarray(normal, float) / h
    return T, G


def _plus_face(edge):
    nx, ny = edge.normal
    if edge.orientation == "v":
        return "right" if nx > 0 else "left"
    return "top" if ny > 0 else "bottom"


_OPPOSITE = {"right": "left", "left": "right", "top": "bottom", "bottom": "top"}


def _edge_local_matrices(face, normal, h, interior):
    """Per-segment matrices ``(S_plus, S_minus, P)`` so that the local edge
    matrix is ``k_plus*S_plus + k_minus*S_minus + (gamma/h)*kbar*P``."""
    W = np.diag(GAUSS2_WEIGHTS * h)
    Tp, Gp = _face_traces(face, normal, h)
    if interior:
        Tm, Gm = _face_traces(_OPPOSITE[face], normal, h)
        J = np.hstack([Tp, -Tm])
        Dp = np.hstack([0.5 * Gp, np.zeros_like(Gm)])
        Dm = np.hstack([np.zeros_like(Gp), 0.5 * Gm])
    else:
        J = Tp
        Dp = Gp
        Dm = np.zeros_like(Gp)
    Cp = J.T @ W @ Dp
    Cm = J.T @ W @ Dm
    return -(Cp + Cp.T), -(Cm + Cm.T), J.T @ W @ J


def _scatter(dofs, local_vals, n):
    """COO triplets from per-element dof lists ``(ne, k)`` and matrices ``(ne, k, k)``."""
    k = dofs.shape[1]
    rows = np.repeat(dofs, k, axis=1).ravel()
    cols = np.tile(dofs, (1, k)).ravel()
    return sp.coo_matrix((local_vals.ravel(), (rows, cols)), shape=(n, n))


def _symmetrize(A):
    # IEEE addition is commutative, so the result is exactly symmetric.
    A = A.tocsr()
    A = (0.5 * (A + A.T)).tocsr()
    A.sum_duplicates()
    A.sort_indices()
    return A


def _bulk(mesh, kappa):
    vals = kappa[:, None, None] * Q1_STIFFNESS[None]
    return _scatter(mesh.cell_dofs, vals, mesh.n_dofs)


def _edge_terms(mesh, field, gamma, consistency=True):
    h = mesh.h
    kbar_block = block_maxima(field, mesh)
    kappa = field.values
    pieces = []
    groups = {}
    for e in mesh.coarse_edges:
        key = (e.orientation, e.normal, e.is_boundary)
        groups.setdefault(key, []).append(e)
    for (orientation, normal, boundary), edges in groups.items():
        face = _plus_face(edges[0])
        Sp, Sm, P = _edge_local_matrices(face, normal, h, not boundary)
        pcells = np.concatenate([e.plus_cells for e in edges])
        kp = kappa[pcells]
        if boundary:
            dofs = mesh.cell_dofs[pcells]
            kb = np.repeat([kbar_block[e.plus_block] for e in edges], mesh.nf_per_block)
            km = np.zeros_like(kp)
        else:
            mcells = np.concatenate([e.minus_cells for e in edges])
            dofs = np.hstack([mesh.cell_dofs[pcells], mesh.cell_dofs[mcells]])
            kb = np.repeat([0.5 * (kbar_block[e.plus_block] + kbar_block[e.minus_block])
                            for e in edges], mesh.nf_per_block)
            km = kappa[mcells]
        vals = (gamma / h) * kb[:, None, None] * P[None]
        if consistency:
            vals = vals + kp[:, None, None] * Sp[None] + km[:, None, None] * Sm[None]
        pieces.append(_scatter(dofs, vals, mesh.n_dofs))
    return pieces


def assemble_mass(mesh):
    """Block-diagonal L2 mass matrix (independent of the coefficient)."""
    Mb = Q1_MASS_UNIT * mesh.h ** 2
    vals = np.broadcast_to(Mb, (mesh.n_cells, 4, 4))
    return _symmetrize(_scatter(mesh.cell_dofs, vals, mesh.n_dofs))


def assemble_block(mesh, field, block):
    """Neumann stiffness ``a_i`` and mass on one block, in local dof numbering."""
    offset = block * mesh.dofs_per_block
    cells = mesh.block_cells[block]
    local = mesh.cell_dofs[cells] - offset
    n = mesh.dofs_per_block
    K = _scatter(local, field.values[cells][:, None, None] * Q1_STIFFNESS[None], n)
    M = _scatter(local, np.broadcast_to(Q1_MASS_UNIT * mesh.h ** 2, (len(cells), 4, 4)), n)
    return _symmetrize(K), _symmetrize(M)


def assemble_block_stiffness(mesh, field):
    """Global block-diagonal matrix of the per-block forms ``a_i``."""
    return _symmetrize(_bulk(mesh, field.values))


def assemble_ipdg(mesh, field, gamma=DEFAULT_GAMMA, check_coercivity=True, dense_limit=4000):
    """Symmetric interior penalty DG stiffness matrix.

    Boundary coarse edges carry the Nitsche terms for homogeneous Dirichlet
    data.  When the system is small enough a dense eigensolve checks positive
    definiteness and warns if the penalty looks too weak.
    """
    if gamma <= 0:
        raise ValueError(f"penalty gamma must be positive, got {gamma}")
    A = _bulk(mesh, field.values)
    for piece in _edge_terms(mesh, field, gamma):
        A = A + piece
    A = _symmetrize(A)
    if check_coercivity and mesh.n_dofs <= dense_limit:
        lam = sla.eigvalsh(A.toarray(), subset_by_index=[0, 0])[0]
        if lam < 0:
            warnings.warn(f"IPDG matrix has a negative eigenvalue {lam:.3e} at gamma={gamma}; "
                          "increase the penalty", RuntimeWarning, stacklevel=2)
    return A


def assemble_anorm(mesh, field, gamma=DEFAULT_GAMMA):
    """Matrix of the broken energy norm: bulk terms plus jump penalties."""
    if gamma <= 0:
        raise ValueError(f"penalty gamma must be positive, got {gamma}")
    N = _bulk(mesh, field.values)
    for piece in _edge_terms(mesh, field, gamma, consistency=False):
        N = N + piece
    return _symmetrize(N)


class MassSolver:
    """Direct solver for the block-diagonal mass matrix.

    Every block carries the same Q1 mass matrix, so one Cholesky factor of a
    single block serves the whole system.
    """

    def __init__(self, mesh):
        cells = mesh.block_cells[0]
        local = mesh.cell_dofs[cells]
        Mb = _scatter(local, np.broadcast_to(Q1_MASS_UNIT * mesh.h ** 2, (len(cells), 4, 4)),
                      mesh.dofs_per_block).toarray()
        self._factor = sla.cho_factor(Mb)
        self._shape = (mesh.n_blocks, mesh.dofs_per_block)

    def solve(self, b):
        b = np.asarray(b, float)
        if b.ndim == 1:
            X = sla.cho_solve(self._factor, b.reshape(self._shape).T)
            return X.T.ravel()
        cols = [self.solve(b[:, j]) for j in range(b.shape[1])]
        return np.column_stack(cols)


def gauss_rule(order):
    x, w = np.polynomial.legendre.leggauss(order)
    return 0.5 * (x + 1.0), 0.5 * w


def cell_quadrature(mesh, order=2):
    """Physical quadrature points, weights and shape values on every fine cell.

    Returns ``(points (ncells, q, 2), weights (q,), shape (q, 4))``.
    """
    t, w = gauss_rule(order)
    xi, eta = np.meshgrid(t, t, indexing="ij")
    xi, eta = xi.ravel(), eta.ravel()
    wq = np.outer(w, w).ravel() * mesh.h ** 2
    origin = mesh.dof_coords[mesh.cell_dofs[:, 0]]
    pts = origin[:, None, :] + mesh.h * np.stack([xi, eta], axis=-1)[None]
    return pts, wq, q1_shape(xi, eta)


def load_vector(mesh, func, order=2):
    """``F_i = (f, N_i)`` by tensor Gauss quadrature on each fine cell."""
    pts, wq, N = cell_quadrature(mesh, order)
    fv = np.asarray(func(pts[..., 0], pts[..., 1]), dtype=float)
    fv = np.broadcast_to(fv, pts.shape[:2])
    local = (fv * wq[None]) @ N  # (ncells, 4)
    F = np.zeros(mesh.n_dofs)
    np.add.at(F, mesh.cell_dofs, local)
    return F


def l2_project(mesh, func, order=3, solver=None):
    solver = solver or MassSolver(mesh)
    return solver.solve(load_vector(mesh, func, order))


def l2_error_analytic(mesh, u, func, order=3):
    """``||u_h - func||_{L2}`` by Gauss quadrature on the fine cells."""
    pts, wq, N = cell_quadrature(mesh, order)
    uh = u[mesh.cell_dofs] @ N.T
    ex = func(pts[..., 0], pts[..., 1])
    return float(np.sqrt(np.sum((uh - ex) ** 2 * wq[None])))


def dump_operator(path, matrix, role):
    """Write a triplet file with header ``%%<role> <dim> <nnz>`` (1-based indices)."""
    A = sp.coo_matrix(matrix)
    lines = [f"%%{role} {A.shape[0]} {A.nnz}"]
    lines += [f"{i + 1} {j + 1} {v!r}" for i, j, v in zip(A.row, A.col, A.data.tolist())]
    Path(path).write_text("\n".join(lines) + "\n")


def read_operator(path):
    lines = Path(path).read_text().splitlines()
    header = lines[0].split()
    role, n, nnz = header[0][2:], int(header[1]), int(header[2])
    data = np.loadtxt(lines[1:], ndmin=2) if nnz else np.zeros((0, 3))
    A = sp.coo_matrix((data[:, 2], (data[:, 0].astype(int) - 1, data[:, 1].astype(int) - 1)),
                      shape=(n, n))
    return role, A.tocsr()


class FineOperators:
    """The fine matrices a simulation needs, built once per mesh and medium."""

    def __init__(self, mesh, field, gamma=DEFAULT_GAMMA, check_coercivity=True):
        self.mesh, self.field, self.gamma = mesh, field, gamma
        self.A = assemble_ipdg(mesh, field, gamma, check_coercivity=check_coercivity)
        self.M = assemble_mass(mesh)
        self.N = assemble_anorm(mesh, field, gamma)
        self.mass_solver = MassSolver(mesh)
