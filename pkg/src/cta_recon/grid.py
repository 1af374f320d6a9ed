"""Voxel lattice data model, coordinate transforms and shared filters.

Arrays are indexed ``values[i, j, k]`` with ``i`` along x, ``j`` along y and
``k`` along z.  On disk and for every linear index the x index varies fastest
(Fortran order), matching the NRRD convention.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import ndimage

from ._geom import polyline_projection_kernel

KINDS = ("intensity", "weight", "membership", "distance", "phi")


class GridError(ValueError):
    """Raised for malformed grids, incompatible shapes or bad parameters."""


class BoundsError(IndexError):
    """Raised when an index or world point falls outside a lattice."""


def _triple(value, name) -> tuple:
    out = tuple(float(v) for v in value)
    if len(out) != 3:
        raise GridError(f"{name} must have three components, got {value!r}")
    if not all(np.isfinite(out)):
        raise GridError(f"{name} must be finite, got {value!r}")
    return out


@dataclass(frozen=True)
class Lattice:
    dims: tuple
    spacing: tuple = (1.0, 1.0, 1.0)
    origin: tuple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        if len(dims) != 3 or min(dims) < 1:
            raise GridError(f"dims must be three positive integers, got {self.dims!r}")
        spacing = _triple(self.spacing, "spacing")
        if min(spacing) <= 0:
            raise GridError(f"spacing must be positive, got {spacing}")
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "origin", _triple(self.origin, "origin"))

    @classmethod
    def like(cls, other: "Lattice") -> "Lattice":
        return cls(other.dims, other.spacing, other.origin)

    @property
    def size(self) -> int:
        return int(np.prod(self.dims))

    def same_geometry(self, other: "Lattice") -> bool:
        return (
            self.dims == other.dims
            and np.allclose(self.spacing, other.spacing, rtol=0, atol=1e-9)
            and np.allclose(self.origin, other.origin, rtol=0, atol=1e-9)
        )

    def voxel_to_world(self, index) -> np.ndarray:
        idx = np.asarray(index)
        if idx.shape[-1] != 3:
            raise GridError("index must have three components")
        if np.any(idx < 0) or np.any(idx >= np.asarray(self.dims)):
            raise BoundsError(f"index {index} outside dims {self.dims}")
        return np.asarray(self.origin) + idx * np.asarray(self.spacing)

    def world_to_continuous(self, point) -> np.ndarray:
        return (np.asarray(point, dtype=float) - np.asarray(self.origin)) / np.asarray(self.spacing)

    def world_to_voxel(self, point) -> tuple:
        """Nearest lattice index of a world point (mm)."""
        idx = np.rint(self.world_to_continuous(point)).astype(int)
        if np.any(idx < 0) or np.any(idx >= np.asarray(self.dims)):
            raise BoundsError(f"point {tuple(np.asarray(point).tolist())} mm lies outside the volume")
        return tuple(int(v) for v in idx)

    def contains(self, point) -> bool:
        c = self.world_to_continuous(point)
        return bool(np.all(c >= -0.5) and np.all(c <= np.asarray(self.dims) - 0.5))

    def world_coordinates(self) -> tuple:
        """Open-mesh world coordinate axes (x, y, z), broadcastable to dims."""
        axes = []
        for a in range(3):
            shape = [1, 1, 1]
            shape[a] = self.dims[a]
            axes.append((self.origin[a] + np.arange(self.dims[a]) * self.spacing[a]).reshape(shape))
        return tuple(axes)

    def linear_index(self, index) -> np.ndarray:
        return np.ravel_multi_index(tuple(np.asarray(index).T), self.dims, order="F")

    def anisotropy_warning(self) -> bool:
        """True when in-plane spacing differs by more than 1%."""
        sx, sy, _ = self.spacing
        return abs(sx - sy) > 0.01 * max(sx, sy)


@dataclass(frozen=True)
class VoxelGrid(Lattice):
    values: np.ndarray = field(default=None, repr=False)
    kind: str = "intensity"

    def __post_init__(self):
        if self.values is None:
            raise GridError("values are required")
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 3:
            raise GridError(f"values must be 3D, got shape {values.shape}")
        object.__setattr__(self, "dims", tuple(values.shape) if self.dims is None else self.dims)
        super().__post_init__()
        if values.shape != self.dims:
            raise GridError(f"value count {values.size} does not match dims {self.dims}")
        if self.kind not in KINDS:
            raise GridError(f"unknown grid kind {self.kind!r}")
        if self.kind in ("weight", "membership") and values.size and (
            values.min() < 0 or values.max() > 1
        ):
            raise GridError(f"{self.kind} grid values must lie in [0, 1]")
        if self.kind == "distance" and values.size and values.min() < 0:
            raise GridError("distance grid values must be non-negative")
        if values is self.values:
            values = values.copy()
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    @classmethod
    def from_array(cls, values, spacing=(1.0, 1.0, 1.0), origin=(0.0, 0.0, 0.0), kind="intensity"):
        values = np.asarray(values, dtype=np.float64)
        return cls(values.shape, spacing, origin, values, kind)

    def with_values(self, values, kind=None) -> "VoxelGrid":
        return VoxelGrid(self.dims, self.spacing, self.origin, values, kind or self.kind)


@dataclass(frozen=True)
class BinaryMask(Lattice):
    values: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        if self.values is None:
            raise GridError("values are required")
        values = np.asarray(self.values).astype(bool)
        if values.ndim != 3:
            raise GridError(f"mask must be 3D, got shape {values.shape}")
        super().__post_init__()
        if values.shape != self.dims:
            raise GridError(f"mask shape {values.shape} does not match dims {self.dims}")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    @classmethod
    def like(cls, grid: Lattice, values) -> "BinaryMask":
        return cls(grid.dims, grid.spacing, grid.origin, values)

    @property
    def count(self) -> int:
        return int(self.values.sum())


def voxel_to_world(grid: Lattice, index) -> np.ndarray:
    return grid.voxel_to_world(index)


def world_to_voxel(grid: Lattice, point) -> tuple:
    return grid.world_to_voxel(point)


def gaussian_smooth(grid: VoxelGrid, sigma_mm: float) -> VoxelGrid:
    """Separable Gaussian blur with per-axis sigma ``sigma_mm / spacing``.

    The kernel is truncated at 4 sigma and renormalized to unit mass; edges
    replicate the border voxel.
    """
    if not sigma_mm > 0:
        raise GridError(f"sigma_mm must be positive, got {sigma_mm}")
    sigma = [sigma_mm / s for s in grid.spacing]
    out = ndimage.gaussian_filter(grid.values, sigma, mode="nearest", truncate=4.0)
    return grid.with_values(out)


def second_differences(values: np.ndarray, spacing: Sequence[float]) -> dict:
    """Central second differences with replicate padding.

    Returns the six unique Hessian components keyed ``xx, yy, zz, xy, xz, yz``.
    """
    p = np.pad(values, 1, mode="edge")
    c = p[1:-1, 1:-1, 1:-1]
    sx, sy, sz = spacing

    def sl(di, dj, dk):
        nx, ny, nz = values.shape
        return p[1 + di:1 + di + nx, 1 + dj:1 + dj + ny, 1 + dk:1 + dk + nz]

    out = {
        "xx": (sl(1, 0, 0) - 2 * c + sl(-1, 0, 0)) / sx**2,
        "yy": (sl(0, 1, 0) - 2 * c + sl(0, -1, 0)) / sy**2,
        "zz": (sl(0, 0, 1) - 2 * c + sl(0, 0, -1)) / sz**2,
        "xy": (sl(1, 1, 0) - sl(1, -1, 0) - sl(-1, 1, 0) + sl(-1, -1, 0)) / (4 * sx * sy),
        "xz": (sl(1, 0, 1) - sl(1, 0, -1) - sl(-1, 0, 1) + sl(-1, 0, -1)) / (4 * sx * sz),
        "yz": (sl(0, 1, 1) - sl(0, 1, -1) - sl(0, -1, 1) + sl(0, -1, -1)) / (4 * sy * sz),
    }
    return out


def hessian_field(grid: VoxelGrid, sigma_mm: float) -> dict:
    """Scale-normalized Hessian of the ``sigma_mm``-smoothed grid.

    Components are multiplied by ``sigma_mm**2`` so responses are comparable
    across scales.
    """
    if not sigma_mm > 0:
        raise GridError(f"sigma_mm must be positive, got {sigma_mm}")
    if min(grid.dims) < 3:
        raise GridError(f"grid {grid.dims} is smaller than 3 voxels on some axis")
    smoothed = gaussian_smooth(grid, sigma_mm).values
    h = second_differences(smoothed, grid.spacing)
    for key in h:
        h[key] *= sigma_mm**2
    return h


def polyline_projection(points: np.ndarray, line_points: np.ndarray):
    """Exact minimum distance (mm) and arc-length projection onto a polyline.

    Returns ``(distance, arclength)`` where ``arclength`` is the position of
    the closest polyline point, measured from the first vertex and extended
    linearly past the end vertices so callers can detect points beyond the
    ends.
    """
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    line = np.asarray(line_points, dtype=float).reshape(-1, 3)
    if len(line) == 0:
        raise GridError("polyline is empty")
    if len(line) == 1:
        diff = pts - line[0]
        return np.sqrt(np.einsum("ij,ij->i", diff, diff)), np.zeros(len(pts))
    best, best_s, end = polyline_projection_kernel(np.ascontiguousarray(pts),
                                                   np.ascontiguousarray(line))
    # extend past the ends along the end tangents
    for flag, vertex, direction in ((-1, line[0], line[0] - line[1]),
                                    (1, line[-1], line[-1] - line[-2])):
        norm = np.linalg.norm(direction)
        if norm == 0:
            continue
        along = (pts - vertex) @ (direction / norm)
        sel = (end == flag) & (along > 0)
        best_s[sel] = best_s[sel] + flag * along[sel]
    return best, best_s


def distance_to_polyline(grid: Lattice, line) -> VoxelGrid:
    """Per-voxel Euclidean distance to a polyline, in in-plane voxel units.

    The distance is computed in mm (so anisotropic z is handled exactly) and
    then divided by the x spacing.
    """
    line_points = getattr(line, "points", line)
    line_points = np.asarray(line_points, dtype=float).reshape(-1, 3)
    if len(line_points) == 0:
        raise GridError("polyline is empty")
    x, y, z = np.broadcast_arrays(*grid.world_coordinates())
    pts = np.stack([x.ravel(), y.ravel(), z.ravel()], axis=1)
    dist, _ = polyline_projection(pts, line_points)
    return VoxelGrid(grid.dims, grid.spacing, grid.origin,
                     (dist / grid.spacing[0]).reshape(grid.dims), "distance")


def polyline_arclength_field(grid: Lattice, line_points) -> np.ndarray:
    """Arc-length position (mm) of each voxel's projection on a polyline."""
    x, y, z = np.broadcast_arrays(*grid.world_coordinates())
    pts = np.stack([x.ravel(), y.ravel(), z.ravel()], axis=1)
    _, s = polyline_projection(pts, np.asarray(line_points, dtype=float))
    return s.reshape(grid.dims)


def ball_structure(radius_vox: float) -> np.ndarray:
    r = int(np.floor(radius_vox))
    ax = np.arange(-r, r + 1)
    x, y, z = np.meshgrid(ax, ax, ax, indexing="ij")
    return (x**2 + y**2 + z**2) <= radius_vox**2 + 1e-9


def dilate(mask: np.ndarray, radius_vox: float) -> np.ndarray:
    if radius_vox <= 0:
        return mask.copy()
    return ndimage.binary_dilation(mask, structure=ball_structure(radius_vox))
