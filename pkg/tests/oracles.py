"""Independent dense reference implementations for small meshes.

Nothing here reuses the package's element matrices or solvers: basis
functions are evaluated pointwise from node coordinates and every integral
is done by 3-point Gauss quadrature in physical space.
"""
import numpy as np
import scipy.linalg as sla

G3_X, G3_W = np.polynomial.legendre.leggauss(3)
G3_X = 0.5 * (G3_X + 1.0)
G3_W = 0.5 * G3_W


def _cell_origin(mesh, cell):
    n = mesh.n_fine
    return (cell % n) * mesh.h, (cell // n) * mesh.h


def _cell_eval(mesh, cell, x, y):
    """Values and gradients of the 4 corner functions of ``cell`` at (x, y)."""
    h = mesh.h
    x0, y0 = _cell_origin(mesh, cell)
    dofs = mesh.cell_dofs[cell]
    vals, grads = [], []
    for d in dofs:
        xd, yd = mesh.dof_coords[d]
        if abs(xd - x0) < 1e-12 * max(1.0, x0):
            fx, gx = (x0 + h - x) / h, -1.0 / h
        else:
            fx, gx = (x - x0) / h, 1.0 / h
        if abs(yd - y0) < 1e-12 * max(1.0, y0):
            fy, gy = (y0 + h - y) / h, -1.0 / h
        else:
            fy, gy = (y - y0) / h, 1.0 / h
        vals.append(fx * fy)
        grads.append((gx * fy, fx * gy))
    return dofs, np.array(vals), np.array(grads)


def _block_max(mesh, kappa):
    n = mesh.n_fine
    centers_x = (np.arange(mesh.n_cells) % n + 0.5) * mesh.h
    centers_y = (np.arange(mesh.n_cells) // n + 0.5) * mesh.h
    bx = np.floor(centers_x / mesh.H).astype(int)
    by = np.floor(centers_y / mesh.H).astype(int)
    out = np.zeros(mesh.n_blocks)
    for c in range(mesh.n_cells):
        b = by[c] * mesh.nc + bx[c]
        out[b] = max(out[b], kappa[c])
    return out


def dense_mass(mesh):
    M = np.zeros((mesh.n_dofs, mesh.n_dofs))
    h = mesh.h
    for c in range(mesh.n_cells):
        x0, y0 = _cell_origin(mesh, c)
        for xi, wx in zip(G3_X, G3_W):
            for eta, wy in zip(G3_X, G3_W):
                dofs, v, _ = _cell_eval(mesh, c, x0 + xi * h, y0 + eta * h)
                M[np.ix_(dofs, dofs)] += wx * wy * h * h * np.outer(v, v)
    return M


def dense_ipdg(mesh, kappa, gamma=4.0, consistency=True):
    """Symmetric IPDG matrix (``consistency=False`` gives the a-norm matrix)."""
    n = mesh.n_dofs
    h = mesh.h
    A = np.zeros((n, n))
    for c in range(mesh.n_cells):
        x0, y0 = _cell_origin(mesh, c)
        for xi, wx in zip(G3_X, G3_W):
            for eta, wy in zip(G3_X, G3_W):
                dofs, _, g = _cell_eval(mesh, c, x0 + xi * h, y0 + eta * h)
                A[np.ix_(dofs, dofs)] += kappa[c] * wx * wy * h * h * (g @ g.T)
    kmax = _block_max(mesh, kappa)
    for e in mesh.coarse_edges:
        nrm = np.array(e.normal)
        kbar = kmax[e.plus_block] if e.is_boundary else 0.5 * (kmax[e.plus_block]
                                                               + kmax[e.minus_block])
        for k in range(mesh.nf_per_block):
            pc = e.plus_cells[k]
            a = mesh.dof_coords[e.plus_nodes[k, 0]]
            b = mesh.dof_coords[e.plus_nodes[k, 1]]
            for t, w in zip(G3_X, G3_W):
                x, y = a + t * (b - a)
                pd, pv, pg = _cell_eval(mesh, pc, x, y)
                if e.is_boundary:
                    dofs = pd
                    jump = pv
                    flux = kappa[pc] * (pg @ nrm)
                else:
                    mc = e.minus_cells[k]
                    md, mv, mg = _cell_eval(mesh, mc, x, y)
                    dofs = np.concatenate([pd, md])
                    jump = np.concatenate([pv, -mv])
                    flux = 0.5 * np.concatenate([kappa[pc] * (pg @ nrm), kappa[mc] * (mg @ nrm)])
                loc = (gamma / h) * kbar * np.outer(jump, jump)
                if consistency:
                    loc -= np.outer(jump, flux) + np.outer(flux, jump)
                A[np.ix_(dofs, dofs)] += w * h * loc
    return A


def dense_block_matrices(mesh, kappa, block):
    """Neumann stiffness and mass of one block in its local numbering."""
    n = mesh.dofs_per_block
    K = np.zeros((n, n))
    Mb = np.zeros((n, n))
    off = mesh.block_dofs[block][0]
    h = mesh.h
    for c in mesh.block_cells[block]:
        x0, y0 = _cell_origin(mesh, c)
        for xi, wx in zip(G3_X, G3_W):
            for eta, wy in zip(G3_X, G3_W):
                dofs, v, g = _cell_eval(mesh, c, x0 + xi * h, y0 + eta * h)
                loc = dofs - off
                K[np.ix_(loc, loc)] += kappa[c] * wx * wy * h * h * (g @ g.T)
                Mb[np.ix_(loc, loc)] += wx * wy * h * h * np.outer(v, v)
    return K, Mb


def dense_test_space(mesh, kappa, M, L):
    """Phi with M-orthonormal, sign-normalised lowest modes (simple spectra only)."""
    Phi = np.zeros((mesh.n_dofs, mesh.n_blocks * L))
    lam_next = []
    for i in range(mesh.n_blocks):
        K, Mb = dense_block_matrices(mesh, kappa, i)
        w, V = sla.eigh(K, Mb)
        lam_next.append(mesh.H ** 2 * w[L])
        for j in range(L):
            v = V[:, j] / np.sqrt(V[:, j] @ Mb @ V[:, j])
            first = np.flatnonzero(np.abs(v) > 1e-8 * np.abs(v).max())[0]
            if v[first] < 0:
                v = -v
            Phi[mesh.block_dofs[i], i * L + j] = v
    return Phi, min(lam_next)


def region_dofs(mesh, block, m):
    bx, by = block % mesh.nc, block // mesh.nc
    members = [b for b in range(mesh.n_blocks)
               if max(abs(b % mesh.nc - bx), abs(b // mesh.nc - by)) <= m]
    return members, np.concatenate([mesh.block_dofs[b] for b in members])


def dense_cem(mesh, A, M, Phi, L, m):
    """Localized trial functions via the Schur complement (no KKT factorization)."""
    Psi = np.zeros_like(Phi)
    for i in range(mesh.n_blocks):
        members, dofs = region_dofs(mesh, i, m)
        cols = np.concatenate([np.arange(b * L, (b + 1) * L) for b in members])
        AR = A[np.ix_(dofs, dofs)]
        B = (M @ Phi)[np.ix_(dofs, cols)].T
        X = np.linalg.solve(AR, B.T)
        S = B @ X
        for j in range(L):
            e = (cols == i * L + j).astype(float)
            Psi[dofs, i * L + j] = X @ np.linalg.solve(S, e)
    return Psi


def dense_leapfrog(K, load, U0, U1, tau, n_steps):
    Up, Uc = U0.copy(), U1.copy()
    for n in range(1, n_steps + 1):
        Un = 2 * Uc - Up + tau * tau * (load(n * tau) - K @ Uc)
        Up, Uc = Uc, Un
    return Up, Uc


def dense_load(mesh, func):
    """``(f, N_i)`` by 3x3 Gauss on each fine cell."""
    F = np.zeros(mesh.n_dofs)
    h = mesh.h
    for c in range(mesh.n_cells):
        x0, y0 = _cell_origin(mesh, c)
        for xi, wx in zip(G3_X, G3_W):
            for eta, wy in zip(G3_X, G3_W):
                x, y = x0 + xi * h, y0 + eta * h
                dofs, v, _ = _cell_eval(mesh, c, x, y)
                F[dofs] += wx * wy * h * h * func(x, y) * v
    return F
