"""Occupancy-grid world model and truncated Euclidean distance field.

The grid stores boolean occupancy per cell. The distance field stores, per
cell, the Euclidean distance to the nearest occupied cell center, clamped to
a truncation radius. Continuous queries interpolate cell-center values
trilinearly; gradients differentiate the interpolant analytically so they are
consistent with the interpolated values.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage


class GridError(ValueError):
    """Malformed grid description or file."""


@dataclass
class OccupancyGrid:
    """Axis-aligned voxel grid. `origin` is the world position of the
    low corner of cell (0, 0, 0); cell centers sit at origin + (i + 0.5) * res.
    """

    resolution: float
    origin: np.ndarray
    dims: tuple[int, int, int]
    occupancy: np.ndarray = field(repr=False)

    def __post_init__(self):
        if self.resolution <= 0:
            raise GridError("resolution must be positive")
        if any(n < 1 for n in self.dims):
            raise GridError("all dims must be >= 1")
        self.origin = np.asarray(self.origin, dtype=np.float64)
        self.occupancy = np.asarray(self.occupancy, dtype=bool)
        if self.occupancy.shape != tuple(self.dims):
            raise GridError(
                f"occupancy shape {self.occupancy.shape} != dims {self.dims}"
            )

    @classmethod
    def empty(cls, resolution, dims, origin=(0.0, 0.0, 0.0)) -> "OccupancyGrid":
        return cls(resolution, np.asarray(origin, float), tuple(dims),
                   np.zeros(tuple(dims), dtype=bool))

    def cell_of(self, p) -> tuple[int, int, int]:
        """Cell index containing world point p (no bounds check)."""
        idx = np.floor((np.asarray(p, float) - self.origin) / self.resolution)
        return tuple(int(v) for v in idx)

    def center_of(self, cell) -> np.ndarray:
        """World position of a cell center."""
        return self.origin + (np.asarray(cell, float) + 0.5) * self.resolution

    def in_bounds(self, cell) -> bool:
        return all(0 <= c < n for c, n in zip(cell, self.dims))

    def is_occupied(self, cell) -> bool:
        if not self.in_bounds(cell):
            return False
        return bool(self.occupancy[cell])

    def occupied_cells(self) -> np.ndarray:
        """(K, 3) int array of occupied cell indices."""
        return np.argwhere(self.occupancy)

    def world_min(self) -> np.ndarray:
        return self.origin.copy()

    def world_max(self) -> np.ndarray:
        return self.origin + np.asarray(self.dims, float) * self.resolution

    def to_json_dict(self) -> dict:
        return {
            "resolution": self.resolution,
            "origin": [float(v) for v in self.origin],
            "dims": list(self.dims),
            "occupied": [[int(i), int(j), int(k)] for i, j, k in self.occupied_cells()],
        }

    @classmethod
    def from_json_dict(cls, d: dict) -> "OccupancyGrid":
        for key in ("resolution", "origin", "dims", "occupied"):
            if key not in d:
                raise GridError(f"grid JSON missing field '{key}'")
        dims = tuple(int(n) for n in d["dims"])
        grid = cls.empty(float(d["resolution"]), dims, np.asarray(d["origin"], float))
        for cell in d["occupied"]:
            i, j, k = (int(v) for v in cell)
            if not grid.in_bounds((i, j, k)):
                raise GridError(f"occupied cell {cell} out of bounds for dims {dims}")
            grid.occupancy[i, j, k] = True
        return grid

    def to_ascii(self) -> str:
        """nz=1 raster, '#' occupied / '.' free. First line is the row with
        the largest y index so the text reads like a map with +y upward.
        """
        if self.dims[2] != 1:
            raise GridError("ASCII raster only supports nz=1 grids")
        rows = []
        for j in range(self.dims[1] - 1, -1, -1):
            rows.append("".join("#" if self.occupancy[i, j, 0] else "."
                                for i in range(self.dims[0])))
        return "\n".join(rows) + "\n"

    @classmethod
    def from_ascii(cls, text: str, resolution: float,
                   origin=(0.0, 0.0, 0.0)) -> "OccupancyGrid":
        lines = [ln for ln in text.splitlines() if ln.strip()]
        if not lines:
            raise GridError("empty ASCII raster")
        nx = len(lines[0])
        if any(len(ln) != nx for ln in lines):
            raise GridError("ASCII raster rows have unequal length")
        ny = len(lines)
        grid = cls.empty(resolution, (nx, ny, 1), origin)
        for row, ln in enumerate(lines):
            j = ny - 1 - row
            for i, ch in enumerate(ln):
                if ch == "#":
                    grid.occupancy[i, j, 0] = True
                elif ch != ".":
                    raise GridError(f"unexpected character {ch!r} in ASCII raster")
        return grid


def load_grid(path, resolution: float | None = None,
              origin=(0.0, 0.0, 0.0)) -> OccupancyGrid:
    """Load a grid from JSON (self-describing) or ASCII raster (needs a
    caller-supplied resolution).
    """
    text = Path(path).read_text()
    stripped = text.lstrip()
    if stripped.startswith("{"):
        try:
            return OccupancyGrid.from_json_dict(json.loads(text))
        except json.JSONDecodeError as e:
            raise GridError(f"malformed grid JSON in {path}: {e}") from e
    if resolution is None:
        raise GridError(f"ASCII grid {path} requires an explicit resolution")
    return OccupancyGrid.from_ascii(text, resolution, origin)


@dataclass
class ESDFField:
    """Truncated distance-to-nearest-obstacle samples over a grid.

    Immutable after build; safe to share across planner instances.
    """

    grid: OccupancyGrid
    distance: np.ndarray = field(repr=False)
    d_trunc: float

    # --- continuous queries -------------------------------------------------

    def _clamped_cell_coords(self, points: np.ndarray):
        """Map world points to continuous cell-center coordinates, clamped to
        the cell-center box. Returns (i0, frac, clamped_mask) per axis.
        """
        g = self.grid
        u = (points - g.origin) / g.resolution - 0.5
        n = np.asarray(g.dims)
        hi = (n - 1).astype(np.float64)
        clamped = (u < 0.0) | (u > hi)
        u = np.clip(u, 0.0, hi)
        i0 = np.minimum(np.floor(u).astype(np.int64), np.maximum(n - 2, 0))
        frac = u - i0
        # single-cell axes interpolate trivially within the only cell
        frac = np.where(n - 1 == 0, 0.0, frac)
        return i0, frac, clamped

    def distance_at(self, p) -> float | np.ndarray:
        """Trilinearly interpolated distance at world point(s) p.

        Out-of-bounds points are clamped to the cell-center box first, which
        keeps the field total (and flat) outside the map.
        """
        pts = np.asarray(p, dtype=np.float64)
        scalar = pts.ndim == 1
        pts = np.atleast_2d(pts)
        i0, f, _ = self._clamped_cell_coords(pts)
        val = self._trilinear(i0, f)
        return float(val[0]) if scalar else val

    def gradient_at(self, p) -> np.ndarray:
        """Spatial gradient of the interpolated distance, zero along any axis
        where the query was clamped outside the grid (consistent with the
        clamped value function).
        """
        pts = np.asarray(p, dtype=np.float64)
        scalar = pts.ndim == 1
        pts = np.atleast_2d(pts)
        i0, f, clamped = self._clamped_cell_coords(pts)
        grad = self._trilinear_grad(i0, f)
        grad[clamped] = 0.0
        return grad[0] if scalar else grad

    def distance_and_gradient(self, p) -> tuple[np.ndarray, np.ndarray]:
        """Value and gradient in one pass (shared coordinate handling)."""
        pts = np.atleast_2d(np.asarray(p, dtype=np.float64))
        i0, f, clamped = self._clamped_cell_coords(pts)
        val = self._trilinear(i0, f)
        grad = self._trilinear_grad(i0, f)
        grad[clamped] = 0.0
        return val, grad

    def _corner_values(self, i0):
        flat = self.distance.ravel()
        nx, ny, nz = self.grid.dims
        i1 = np.minimum(i0 + 1, np.array([nx - 1, ny - 1, nz - 1]))
        x0 = i0[:, 0] * (ny * nz)
        x1 = i1[:, 0] * (ny * nz)
        y0 = i0[:, 1] * nz
        y1 = i1[:, 1] * nz
        z0, z1 = i0[:, 2], i1[:, 2]
        return (flat[x0 + y0 + z0], flat[x1 + y0 + z0],
                flat[x0 + y1 + z0], flat[x1 + y1 + z0],
                flat[x0 + y0 + z1], flat[x1 + y0 + z1],
                flat[x0 + y1 + z1], flat[x1 + y1 + z1])

    def _trilinear(self, i0, f):
        c000, c100, c010, c110, c001, c101, c011, c111 = self._corner_values(i0)
        fx, fy, fz = f[:, 0], f[:, 1], f[:, 2]
        c00 = c000 * (1 - fx) + c100 * fx
        c10 = c010 * (1 - fx) + c110 * fx
        c01 = c001 * (1 - fx) + c101 * fx
        c11 = c011 * (1 - fx) + c111 * fx
        c0 = c00 * (1 - fy) + c10 * fy
        c1 = c01 * (1 - fy) + c11 * fy
        return c0 * (1 - fz) + c1 * fz

    def _trilinear_grad(self, i0, f):
        c000, c100, c010, c110, c001, c101, c011, c111 = self._corner_values(i0)
        fx, fy, fz = f[:, 0], f[:, 1], f[:, 2]
        inv = 1.0 / self.grid.resolution
        # d/dx: difference along x, bilinear in (y, z)
        dx = ((c100 - c000) * (1 - fy) * (1 - fz) + (c110 - c010) * fy * (1 - fz)
              + (c101 - c001) * (1 - fy) * fz + (c111 - c011) * fy * fz) * inv
        dy = ((c010 - c000) * (1 - fx) * (1 - fz) + (c110 - c100) * fx * (1 - fz)
              + (c011 - c001) * (1 - fx) * fz + (c111 - c101) * fx * fz) * inv
        dz = ((c001 - c000) * (1 - fx) * (1 - fy) + (c101 - c100) * fx * (1 - fy)
              + (c011 - c010) * (1 - fx) * fy + (c111 - c110) * fx * fy) * inv
        return np.stack([dx, dy, dz], axis=-1)


def build_esdf(grid: OccupancyGrid, d_trunc: float = 5.0) -> ESDFField:
    """Exact distance transform of the occupancy grid, truncated at d_trunc.

    Distances are measured between cell centers. Occupied cells store 0;
    a grid with no obstacles stores d_trunc everywhere.
    """
    if d_trunc <= 0:
        raise GridError("d_trunc must be positive")
    occ = grid.occupancy
    if not occ.any():
        dist = np.full(occ.shape, float(d_trunc))
        return ESDFField(grid, dist, float(d_trunc))
    # Feature transform gives the nearest occupied cell exactly; the distance
    # is then sqrt of an integer squared cell offset, matching a brute-force
    # scan bit-for-bit.
    nearest = ndimage.distance_transform_edt(
        ~occ, return_distances=False, return_indices=True)
    cells = np.indices(occ.shape)
    sq = ((cells - nearest).astype(np.float64) ** 2).sum(axis=0)
    dist = np.minimum(np.sqrt(sq) * grid.resolution, d_trunc)
    return ESDFField(grid, dist, float(d_trunc))
