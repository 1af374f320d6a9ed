"""Input validation helpers shared by the estimators."""
from __future__ import annotations

import numpy as np

from .grid import BinaryMask, BoundsError, GridError, Lattice, VoxelGrid


def check_grid(grid, kind=None, min_size=1) -> VoxelGrid:
    """Coerce ``grid`` to a VoxelGrid, accepting bare 3D arrays (unit spacing)."""
    if isinstance(grid, np.ndarray):
        grid = VoxelGrid.from_array(grid, kind=kind or "intensity")
    if not isinstance(grid, VoxelGrid):
        raise GridError(f"expected a VoxelGrid, got {type(grid).__name__}")
    if kind is not None and grid.kind != kind:
        raise GridError(f"expected a {kind} grid, got kind={grid.kind!r}")
    if min(grid.dims) < min_size:
        raise GridError(f"grid {grid.dims} is smaller than {min_size} voxels on some axis")
    if not np.all(np.isfinite(grid.values)):
        raise GridError("grid contains non-finite values")
    return grid


def check_mask(mask, like: Lattice | None = None) -> BinaryMask:
    if isinstance(mask, np.ndarray):
        if like is None:
            mask = BinaryMask(mask.shape, values=mask)
        else:
            mask = BinaryMask.like(like, mask)
    if not isinstance(mask, BinaryMask):
        raise GridError(f"expected a BinaryMask, got {type(mask).__name__}")
    if like is not None:
        check_compatible(like, mask)
    return mask


def check_compatible(*grids: Lattice) -> None:
    first = grids[0]
    for g in grids[1:]:
        if not first.same_geometry(g):
            raise GridError(
                f"incompatible grids: {first.dims}/{first.spacing}/{first.origin} "
                f"vs {g.dims}/{g.spacing}/{g.origin}"
            )


def check_point(grid: Lattice, point, name="point") -> np.ndarray:
    p = np.asarray(point, dtype=float)
    if p.shape != (3,) or not np.all(np.isfinite(p)):
        raise GridError(f"{name} must be three finite coordinates, got {point!r}")
    if not grid.contains(p):
        raise BoundsError(f"{name} {tuple(p.tolist())} mm lies outside the volume")
    return p
