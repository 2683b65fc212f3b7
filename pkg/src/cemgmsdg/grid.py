"""Two-level structured mesh on the unit square.

Coarse blocks are squares of side ``H = 1/nc``; each is refined into
``nf x nf`` bilinear (Q1) cells of side ``h = H/nf``.  Degrees of freedom are
numbered block by block, and nodes lying on a coarse edge are duplicated once
per adjacent block, so the discrete space is a direct sum of per-block
conforming Q1 spaces.

Numbering conventions
---------------------
block id       ``b = by * nc + bx``
local node     ``(ix, iy) -> iy * (nf + 1) + ix``
global dof     ``b * (nf + 1)**2 + local``
fine cell      ``gy * (nc * nf) + gx`` (row-major, first row at ``y = 0``)
cell nodes     counterclockwise from the lower-left corner
"""
from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class CoarseEdge:
    """A coarse edge split into ``nf`` fine segments.

    ``normal`` points from the plus block to the minus block, or outward for
    boundary edges (``minus_block is None``).  Segment ``k`` runs between
    ``plus_nodes[k, 0]`` and ``plus_nodes[k, 1]`` in increasing coordinate
    order; ``minus_nodes`` lists the coincident dofs of the other side.
    """

    edge_id: int
    plus_block: int
    minus_block: int | None
    normal: tuple
    orientation: str  # "v" (x = const) or "h" (y = const)
    plus_nodes: np.ndarray
    minus_nodes: np.ndarray | None
    plus_cells: np.ndarray
    minus_cells: np.ndarray | None

    @property
    def is_boundary(self):
        return self.minus_block is None

    @property
    def fine_segments(self):
        """``(plus endpoints, minus endpoints)`` per fine segment."""
        return list(zip(self.plus_nodes, self.minus_nodes if self.minus_nodes is not None
                        else [None] * len(self.plus_nodes)))


@dataclass(frozen=True)
class MeshHierarchy:
    nc: int
    nf_per_block: int
    block_dofs: np.ndarray  # (nblocks, (nf+1)**2)
    block_cells: np.ndarray  # (nblocks, nf**2) global fine cell ids
    cell_dofs: np.ndarray  # (ncells, 4) global dofs, counterclockwise
    cell_block: np.ndarray  # (ncells,)
    dof_coords: np.ndarray  # (ndofs, 2)
    coarse_edges: tuple = field(repr=False)
    domain: tuple = ((0.0, 1.0), (0.0, 1.0))

    @property
    def H(self):
        return 1.0 / self.nc

    @property
    def h(self):
        return 1.0 / (self.nc * self.nf_per_block)

    @property
    def n_blocks(self):
        return self.nc * self.nc

    @property
    def n_fine(self):
        """Fine cells per dimension over the whole domain."""
        return self.nc * self.nf_per_block

    @property
    def n_cells(self):
        return self.n_fine ** 2

    @property
    def dofs_per_block(self):
        return (self.nf_per_block + 1) ** 2

    @property
    def n_dofs(self):
        return self.n_blocks * self.dofs_per_block

    @property
    def interior_edges(self):
        return [e for e in self.coarse_edges if not e.is_boundary]

    @property
    def boundary_edges(self):
        return [e for e in self.coarse_edges if e.is_boundary]

    def block_index(self, bx, by):
        return by * self.nc + bx

    def block_position(self, block):
        return block % self.nc, block // self.nc

    def block_dof_slice(self, block):
        n = self.dofs_per_block
        return slice(block * n, (block + 1) * n)

    def cell_centers(self):
        c = (np.arange(self.n_fine) + 0.5) * self.h
        xx, yy = np.meshgrid(c, c)
        return np.column_stack([xx.ravel(), yy.ravel()])


def _block_local_nodes(nf, ix, iy):
    return iy * (nf + 1) + ix


def build_hierarchy(nc, nf_per_block):
    """Build the coarse/fine mesh pair on the unit square."""
    nc = int(nc)
    nf = int(nf_per_block)
    if nc < 1 or nf < 1:
        raise ValueError(f"degenerate mesh: nc={nc}, nf_per_block={nf}")

    npb = (nf + 1) ** 2
    nblocks = nc * nc
    nfine = nc * nf
    H = 1.0 / nc
    h = H / nf

    block_dofs = np.arange(nblocks * npb).reshape(nblocks, npb)

    # local Q1 connectivity of one block
    cx, cy = np.meshgrid(np.arange(nf), np.arange(nf))
    cx, cy = cx.ravel(), cy.ravel()
    local_cells = np.column_stack([
        _block_local_nodes(nf, cx, cy),
        _block_local_nodes(nf, cx + 1, cy),
        _block_local_nodes(nf, cx + 1, cy + 1),
        _block_local_nodes(nf, cx, cy + 1),
    ])

    ix, iy = np.meshgrid(np.arange(nf + 1), np.arange(nf + 1))
    ix, iy = ix.ravel(), iy.ravel()

    cell_dofs = np.empty((nfine * nfine, 4), dtype=np.int64)
    cell_block = np.empty(nfine * nfine, dtype=np.int64)
    block_cells = np.empty((nblocks, nf * nf), dtype=np.int64)
    dof_coords = np.empty((nblocks * npb, 2))
    for b in range(nblocks):
        bx, by = b % nc, b // nc
        gcells = (by * nf + cy) * nfine + (bx * nf + cx)
        block_cells[b] = gcells
        cell_dofs[gcells] = local_cells + b * npb
        cell_block[gcells] = b
        dof_coords[b * npb:(b + 1) * npb, 0] = (bx * nf + ix) * h
        dof_coords[b * npb:(b + 1) * npb, 1] = (by * nf + iy) * h

    edges = _build_edges(nc, nf, npb, nfine)
    return MeshHierarchy(nc=nc, nf_per_block=nf, block_dofs=block_dofs,
                         block_cells=block_cells, cell_dofs=cell_dofs,
                         cell_block=cell_block, dof_coords=dof_coords,
                         coarse_edges=tuple(edges))


def _build_edges(nc, nf, npb, nfine):
    k = np.arange(nf)
    edges = []

    def side(block, orientation, at_max):
        """Segment endpoint dofs and adjacent cells of ``block`` on one face."""
        bx, by = block % nc, block // nc
        if orientation == "v":
            i = nf if at_max else 0
            nodes = np.column_stack([_block_local_nodes(nf, i, k),
                                     _block_local_nodes(nf, i, k + 1)])
            c = nf - 1 if at_max else 0
            cells = (by * nf + k) * nfine + (bx * nf + c)
        else:
            j = nf if at_max else 0
            nodes = np.column_stack([_block_local_nodes(nf, k, j),
                                     _block_local_nodes(nf, k + 1, j)])
            c = nf - 1 if at_max else 0
            cells = (by * nf + c) * nfine + (bx * nf + k)
        return nodes + block * npb, cells

    def add(plus, minus, normal, orientation, plus_at_max):
        pn, pc = side(plus, orientation, plus_at_max)
        if minus is None:
            mn = mc = None
        else:
            mn, mc = side(minus, orientation, not plus_at_max)
        edges.append(CoarseEdge(len(edges), plus, minus, normal, orientation,
                                pn, mn, pc, mc))

    # interior vertical lines x = i*H, plus block on the left
    for i in range(1, nc):
        for j in range(nc):
            add(j * nc + i - 1, j * nc + i, (1.0, 0.0), "v", True)
    # interior horizontal lines y = j*H, plus block below
    for j in range(1, nc):
        for i in range(nc):
            add((j - 1) * nc + i, j * nc + i, (0.0, 1.0), "h", True)
    # boundary: left, right, bottom, top
    for j in range(nc):
        add(j * nc, None, (-1.0, 0.0), "v", False)
    for j in range(nc):
        add(j * nc + nc - 1, None, (1.0, 0.0), "v", True)
    for i in range(nc):
        add(i, None, (0.0, -1.0), "h", False)
    for i in range(nc):
        add((nc - 1) * nc + i, None, (0.0, 1.0), "h", True)
    return edges


@dataclass(frozen=True)
class BlockRegion:
    """Oversampled region: all blocks within Chebyshev distance ``m``."""

    center_block: int
    m: int
    member_blocks: np.ndarray  # sorted block ids
    dofs: np.ndarray  # sorted global dofs of the member blocks

    def local_index(self, global_dofs):
        """Map global dof ids to positions in ``dofs``; -1 if outside."""
        global_dofs = np.asarray(global_dofs)
        pos = np.searchsorted(self.dofs, global_dofs)
        pos = np.clip(pos, 0, len(self.dofs) - 1)
        return np.where(self.dofs[pos] == global_dofs, pos, -1)

    @property
    def local_dof_map(self):
        return {int(g): i for i, g in enumerate(self.dofs)}


def oversample_region(mesh, block, m):
    if not 0 <= block < mesh.n_blocks:
        raise ValueError(f"invalid block id {block} for {mesh.n_blocks} blocks")
    if m < 0:
        raise ValueError(f"oversampling layers must be >= 0, got {m}")
    nc = mesh.nc
    bx, by = mesh.block_position(block)
    xs = np.arange(max(bx - m, 0), min(bx + m, nc - 1) + 1)
    ys = np.arange(max(by - m, 0), min(by + m, nc - 1) + 1)
    members = (ys[:, None] * nc + xs[None, :]).ravel()
    members.sort()
    dofs = mesh.block_dofs[members].ravel()
    return BlockRegion(int(block), int(m), members, dofs)
