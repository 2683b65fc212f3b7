"""Heterogeneous coefficient fields, piecewise constant per fine cell."""
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

RASTER_MAGIC = b"CEMWRAST"


class RasterFormatError(ValueError):
    pass


@dataclass(frozen=True)
class CoefficientField:
    """Cell values ordered like ``MeshHierarchy`` fine cells (row-major, bottom row first)."""

    values: np.ndarray
    n_fine: int

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.shape != (self.n_fine * self.n_fine,):
            raise ValueError(f"expected {self.n_fine ** 2} cell values, got shape {v.shape}")
        if not np.all(v > 0):
            raise ValueError("coefficient values must be positive")
        object.__setattr__(self, "values", v)

    @property
    def kappa0(self):
        return float(self.values.min())

    @property
    def kappa1(self):
        return float(self.values.max())

    @property
    def contrast(self):
        return self.kappa1 / self.kappa0

    def as_grid(self):
        """View as ``(ny, nx)`` with row 0 at the bottom of the domain."""
        return self.values.reshape(self.n_fine, self.n_fine)

    def scaled(self, c):
        return CoefficientField(self.values * c, self.n_fine)


def constant_field(mesh, value=1.0):
    return CoefficientField(np.full(mesh.n_cells, float(value)), mesh.n_fine)


def synthetic_field(mesh, background=1.0, contrast=1.0, pattern="inclusions", seed=0):
    """Deterministic high-contrast medium.

    ``pattern="inclusions"`` scatters discs, ``"channels"`` lays thin
    horizontal and vertical strips; high-value cells get ``background*contrast``.
    Geometry is drawn in physical coordinates so it does not depend on ``h``.
    """
    if background <= 0:
        raise ValueError(f"background must be positive, got {background}")
    if contrast < 1:
        raise ValueError(f"contrast must be >= 1, got {contrast}")
    if pattern not in ("inclusions", "channels"):
        raise ValueError(f"unknown pattern {pattern!r}")

    values = np.full(mesh.n_cells, float(background))
    if contrast == 1:
        return CoefficientField(values, mesh.n_fine)

    rng = np.random.default_rng(seed)
    xc = mesh.cell_centers()
    x, y = xc[:, 0], xc[:, 1]
    high = np.zeros(mesh.n_cells, dtype=bool)
    if pattern == "inclusions":
        n = 40
        centers = rng.uniform(0.05, 0.95, size=(n, 2))
        radii = rng.uniform(0.015, 0.04, size=n)
        for (cx, cy), r in zip(centers, radii):
            high |= (x - cx) ** 2 + (y - cy) ** 2 <= r * r
        if not high.any():
            cx, cy = centers[0]
            high[np.argmin((x - cx) ** 2 + (y - cy) ** 2)] = True
    else:
        n = 8
        offsets = rng.uniform(0.05, 0.95, size=n)
        widths = rng.uniform(0.01, 0.025, size=n)
        starts = rng.uniform(0.0, 0.3, size=n)
        stops = rng.uniform(0.7, 1.0, size=n)
        for k in range(n):
            o, w, a, b = offsets[k], widths[k], starts[k], stops[k]
            if k % 2 == 0:
                strip = (np.abs(y - o) <= w / 2) & (x >= a) & (x <= b)
                fallback = np.argmin(np.abs(y - o) + np.abs(x - (a + b) / 2))
            else:
                strip = (np.abs(x - o) <= w / 2) & (y >= a) & (y <= b)
                fallback = np.argmin(np.abs(x - o) + np.abs(y - (a + b) / 2))
            if not strip.any():
                strip[fallback] = True
            high |= strip
    values[high] = background * contrast
    return CoefficientField(values, mesh.n_fine)


def _check_raster(nx, ny, values):
    if nx < 1 or ny < 1:
        raise RasterFormatError(f"raster dims must be >= 1, got {nx}x{ny}")
    if values.size != nx * ny:
        raise RasterFormatError(f"header declares {nx}x{ny}={nx * ny} values, found {values.size}")
    if not np.all(np.isfinite(values)) or np.any(values <= 0):
        raise RasterFormatError("raster entries must be finite and positive")
    return values.reshape(ny, nx)


def read_raster(path, format="ascii"):
    """Return the raster as a ``(ny, nx)`` array, row 0 at the bottom."""
    path = Path(path)
    if format == "ascii":
        tokens = path.read_text().split("\n", 1)
        header = tokens[0].split()
        if len(header) != 2:
            raise RasterFormatError(f"malformed header line: {tokens[0]!r}")
        try:
            nx, ny = int(header[0]), int(header[1])
        except ValueError:
            raise RasterFormatError(f"malformed header line: {tokens[0]!r}") from None
        body = tokens[1] if len(tokens) > 1 else ""
        try:
            values = np.array(body.split(), dtype=float)
        except ValueError as exc:
            raise RasterFormatError(f"non-numeric raster entry: {exc}") from None
        return _check_raster(nx, ny, values)
    if format == "binary":
        data = path.read_bytes()
        if len(data) < 16 or data[:8] != RASTER_MAGIC:
            raise RasterFormatError("missing CEMWRAST magic")
        nx, ny = struct.unpack("<II", data[8:16])
        payload = data[16:]
        if len(payload) % 8:
            raise RasterFormatError("binary payload is not a whole number of float64 values")
        values = np.frombuffer(payload, dtype="<f8").astype(float)
        return _check_raster(nx, ny, values)
    raise ValueError(f"unknown raster format {format!r}")


def write_raster(path, grid, format="ascii"):
    """Write a ``(ny, nx)`` array, row 0 at the bottom."""
    grid = np.asarray(grid, dtype=float)
    ny, nx = grid.shape
    path = Path(path)
    if format == "ascii":
        lines = [f"{nx} {ny}"]
        lines += [" ".join(repr(float(v)) for v in row) for row in grid]
        path.write_text("\n".join(lines) + "\n")
    elif format == "binary":
        path.write_bytes(RASTER_MAGIC + struct.pack("<II", nx, ny)
                         + grid.astype("<f8").tobytes())
    else:
        raise ValueError(f"unknown raster format {format!r}")


def resample_nearest(grid, mesh):
    """Nearest-neighbour sample at fine cell centres.

    The raster covers the unit square with ``nx x ny`` pixels; a cell centre
    takes the pixel that contains it (``floor(x*nx)``), so exact ties between
    two pixel centres go to the higher index.
    """
    ny, nx = grid.shape
    c = (np.arange(mesh.n_fine) + 0.5) * mesh.h
    ix = np.minimum(np.floor(c * nx).astype(int), nx - 1)
    iy = np.minimum(np.floor(c * ny).astype(int), ny - 1)
    return grid[np.ix_(iy, ix)].ravel()


def load_raster(path, format, mesh):
    grid = read_raster(path, format)
    return CoefficientField(resample_nearest(grid, mesh), mesh.n_fine)


def layered_model(nx, ny, seed=0, v_min=1.5, v_max=5.5):
    """Marmousi-style raster: folded layers, two normal faults and a fast lens.

    Returns ``kappa = (v/v_min)**2`` as a ``(ny, nx)`` array, row 0 at the
    bottom (deepest).  Velocities grow with depth from ``v_min`` to ``v_max``.
    """
    rng = np.random.default_rng(seed)
    x = (np.arange(nx) + 0.5) / nx
    depth = 1.0 - (np.arange(ny) + 0.5) / ny
    X, D = np.meshgrid(x, depth)
    n_layers = 14
    # folded interfaces: depth shift as a smooth random function of x
    amp = rng.uniform(0.01, 0.05, 3)
    freq = rng.uniform(1.0, 4.0, 3)
    phase = rng.uniform(0, 2 * np.pi, 3)
    fold = sum(a * np.sin(2 * np.pi * f * X + p) for a, f, p in zip(amp, freq, phase))
    Dw = D + fold * np.clip(D / 0.3, 0.0, 1.0)
    for x0, throw in zip(rng.uniform(0.25, 0.75, 2), rng.uniform(0.03, 0.08, 2)):
        # dipping fault plane; the hanging wall drops by ``throw``
        Dw = np.where(X > x0 + 0.4 * (D - 0.5), Dw - throw * (D > 0.15), Dw)
    layer = np.clip(np.floor(Dw * n_layers), 0, n_layers - 1)
    jitter = rng.uniform(-0.25, 0.25, n_layers)
    v = v_min + (v_max - v_min) * np.clip((layer + 0.5 + jitter[layer.astype(int)]) / n_layers,
                                          0.0, 1.0)
    v = np.where(D < 0.06, v_min, v)  # water column
    lens = ((X - rng.uniform(0.3, 0.7)) / 0.18) ** 2 + ((D - 0.65) / 0.07) ** 2 <= 1.0
    v = np.where(lens, v_max, v)
    return (v / v_min) ** 2


def block_kappa_max(field, mesh, block):
    return float(field.values[mesh.block_cells[block]].max())


def block_maxima(field, mesh):
    return field.values[mesh.block_cells].max(axis=1)


def edge_kappa_bar(field, mesh, edge):
    """Penalty weight on a coarse edge: mean of adjacent block maxima."""
    kp = block_kappa_max(field, mesh, edge.plus_block)
    if edge.minus_block is None:
        return kp
    return 0.5 * (kp + block_kappa_max(field, mesh, edge.minus_block))
