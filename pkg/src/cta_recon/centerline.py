"""Speed map, eikonal arrival times and minimum-cost-path centerlines."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from . import _fmm
from .grid import BoundsError, GridError, Lattice, VoxelGrid
from .membership import EmptySelectionError, ThresholdConfig, band_bell
from .validation import check_compatible, check_grid, check_point


class TrappedBacktraceError(RuntimeError):
    """Raised when steepest descent stalls before reaching a seed."""


@dataclass(frozen=True)
class SeedPair:
    start: tuple
    end: tuple

    def __post_init__(self):
        s = tuple(float(v) for v in self.start)
        e = tuple(float(v) for v in self.end)
        if len(s) != 3 or len(e) != 3 or not np.all(np.isfinite(s + e)):
            raise GridError("seeds must be finite 3D world points")
        if s == e:
            raise GridError("start and end seeds coincide")
        object.__setattr__(self, "start", s)
        object.__setattr__(self, "end", e)

    def check(self, grid: Lattice) -> None:
        check_point(grid, self.start, "start seed")
        check_point(grid, self.end, "end seed")


@dataclass(frozen=True)
class Centerline:
    points: np.ndarray
    arclength: np.ndarray = field(default=None)

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float).reshape(-1, 3)
        if len(pts) < 2:
            raise GridError("a centerline needs at least two points")
        seg = np.linalg.norm(np.diff(pts, axis=0), axis=1)
        if np.any(seg <= 0):
            raise GridError("centerline arclength must be strictly increasing")
        s = np.concatenate([[0.0], np.cumsum(seg)])
        pts.setflags(write=False)
        s.setflags(write=False)
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "arclength", s)

    @property
    def length(self) -> float:
        return float(self.arclength[-1])

    def reversed(self) -> "Centerline":
        return Centerline(self.points[::-1].copy())

    def point_at(self, s: float) -> np.ndarray:
        s = float(np.clip(s, 0.0, self.length))
        return np.array([np.interp(s, self.arclength, self.points[:, d]) for d in range(3)])

    def tangent_at(self, s: float, window: float = 1.0) -> np.ndarray:
        a = self.point_at(s - window)
        b = self.point_at(s + window)
        t = b - a
        return t / np.linalg.norm(t)

    def resample(self, step: float) -> "Centerline":
        n = max(int(np.ceil(self.length / step)), 1)
        s = np.linspace(0.0, self.length, n + 1)
        return Centerline(np.stack([np.interp(s, self.arclength, self.points[:, d])
                                    for d in range(3)], axis=1))

    def to_csv(self, path) -> None:
        data = np.column_stack([self.points, self.arclength])
        np.savetxt(path, data, delimiter=",", header="x,y,z,arclength", comments="",
                   fmt="%.6f")

    @classmethod
    def from_csv(cls, path) -> "Centerline":
        data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
        return cls(data[:, :3])


@dataclass(frozen=True)
class ArrivalTimeField:
    times: VoxelGrid
    seeds: tuple
    accepted: np.ndarray = field(default=None, repr=False)


@dataclass
class CenterlineConfig:
    speed_floor: float = 1e-3
    step_voxels: float = 0.5
    smoothing_window: int = 5
    # upwind order of the multistencil differences and radius (voxels) of the
    # exactly initialized ball around each seed
    fmm_order: int = 2
    init_radius_voxels: float = 5.0
    # marching stops at this multiple of the end seed's arrival time
    # (0 marches the whole volume); the path only needs times below it
    march_stop_factor: float = 1.5
    # cross-sectional re-centering of the minimum-cost path
    recenter_iterations: int = 2
    recenter_radius_mm: float = 3.0
    recenter_step_mm: float = 0.5

    def __post_init__(self):
        if self.fmm_order not in (1, 2):
            raise GridError("fmm_order must be 1 or 2")
        if not self.speed_floor > 0 or not self.step_voxels > 0:
            raise GridError("speed_floor and step_voxels must be positive")
        if self.init_radius_voxels < 0:
            raise GridError("init_radius_voxels must be >= 0")
        if self.march_stop_factor != 0 and not self.march_stop_factor >= 1:
            raise GridError("march_stop_factor must be 0 or >= 1")
        if self.recenter_iterations < 0 or not self.recenter_radius_mm > 0 \
                or not self.recenter_step_mm > 0:
            raise GridError("invalid re-centering parameters")


def compute_ml(grid: VoxelGrid, w_vessel: VoxelGrid, cfg: ThresholdConfig | None = None) -> float:
    """Median HU of voxels brighter than the candidate floor with positive
    vesselness."""
    cfg = cfg or ThresholdConfig()
    check_compatible(grid, w_vessel)
    sel = (grid.values > cfg.candidate_hu_floor) & (w_vessel.values > 0)
    if not sel.any():
        raise EmptySelectionError("no vessel candidates above the HU floor")
    return float(np.median(grid.values[sel]))


def lumen_weight_map(grid: VoxelGrid, ml: float, cfg: ThresholdConfig | None = None) -> VoxelGrid:
    """Lumen weight ``0.9 * bell + 0.1`` over the band
    ``[min(ml - l_thres, 500), ml + cp_thres]``."""
    cfg = cfg or ThresholdConfig()
    if not np.isfinite(ml):
        raise GridError("ml must be finite")
    bell = band_bell(min(ml - cfg.l_thres, cfg.lumen_width_max), ml + cfg.cp_thres,
                     cfg.bell_exponent)
    return grid.with_values(0.9 * bell(grid.values) + 0.1, kind="weight")


def speed_map(w_vessel: VoxelGrid, w_lumen: VoxelGrid, speed_floor: float = 1e-3) -> VoxelGrid:
    check_compatible(w_vessel, w_lumen)
    v = np.maximum(w_vessel.values * w_lumen.values, speed_floor)
    return w_vessel.with_values(np.minimum(v, 1.0), kind="weight")


def _seed_indices(grid: Lattice, seeds) -> np.ndarray:
    out = []
    for p in seeds:
        p = np.asarray(p, dtype=float)
        out.append(grid.world_to_voxel(p))
    return np.asarray(out, dtype=np.int64).reshape(-1, 3)


def fast_march(speed: VoxelGrid, seeds, order: int = 2,
               init_radius_voxels: float = 5.0, stop_at=None,
               stop_factor: float = 1.5) -> ArrivalTimeField:
    """Arrival times (mm / speed) from world-point seeds.

    Parameters
    ----------
    speed : VoxelGrid
        Strictly positive speed.
    seeds : sequence of world points
    order : {1, 2}
        Upwind difference order of the multistencil update.
    init_radius_voxels : float
        Voxels closer than this to a seed get the straight-line travel time.
    stop_at : world point, optional
        Stop once times exceed ``stop_factor`` times the arrival at this
        point; later voxels stay at ``inf``.  By default the whole grid is
        marched.
    """
    if np.any(speed.values <= 0):
        raise GridError("speed must be strictly positive")
    seeds = [tuple(float(v) for v in p) for p in seeds]
    if not seeds:
        raise GridError("at least one seed is required")
    idx = _seed_indices(speed, seeds)
    target, factor = -1, np.inf
    if stop_at is not None:
        ti = _seed_indices(speed, [stop_at])[0]
        target = int(ti[0] + speed.dims[0] * (ti[1] + speed.dims[1] * ti[2]))
        factor = float(stop_factor)
    T, accepted = _fmm.fast_march_kernel(
        np.ascontiguousarray(speed.values), np.asarray(speed.spacing), idx, _fmm.STENCILS,
        int(order), float(init_radius_voxels * min(speed.spacing)), target, factor)
    return ArrivalTimeField(VoxelGrid(speed.dims, speed.spacing, speed.origin, T, "distance"),
                            tuple(seeds), accepted)


def _interp_vec(field4: np.ndarray, c: np.ndarray) -> np.ndarray:
    coords = np.asarray(c, dtype=float).reshape(3, 1)
    return np.array([ndimage.map_coordinates(field4[..., d], coords, order=1, mode="nearest")[0]
                     for d in range(3)])


def backtrace_path(T: ArrivalTimeField, end, step_voxels: float = 0.5,
                   max_steps: int | None = None) -> Centerline:
    """Steepest descent on the arrival-time field from ``end`` to the nearest
    seed, integrated with RK4.  Returned ordered seed -> end."""
    grid = T.times
    end = check_point(grid, end, "end point")
    h = step_voxels * min(grid.spacing)
    seeds = np.asarray(T.seeds, dtype=float)
    # the march starts from the voxel centre nearest each seed, so descent
    # ends there; arriving near either point completes the path
    snapped = np.array([grid.voxel_to_world(grid.world_to_voxel(p)) for p in seeds])
    nearest = seeds[np.argmin(np.linalg.norm(seeds - end, axis=1))]
    if np.linalg.norm(nearest - end) <= h:
        if np.allclose(nearest, end):
            # degenerate request: shortest admissible path of one step
            return Centerline(np.array([nearest, nearest + np.array([h, 0.0, 0.0])]))
        return Centerline(np.array([nearest, end]))
    direction = _fmm.descent_field(np.ascontiguousarray(grid.values), np.asarray(grid.spacing))
    spacing = np.asarray(grid.spacing)
    origin = np.asarray(grid.origin)
    hi = np.asarray(grid.dims) - 1

    def velocity(x):
        c = np.clip((x - origin) / spacing, 0, hi)
        v = _interp_vec(direction, c)
        n = np.linalg.norm(v)
        if n < 1e-8:
            return None
        return v / n

    def tval(x):
        c = np.clip((x - origin) / spacing, 0, hi).reshape(3, 1)
        return ndimage.map_coordinates(grid.values, c, order=1, mode="nearest")[0]

    if max_steps is None:
        max_steps = int(8 * sum(grid.dims) / step_voxels)
    path = [end]
    x = end.copy()
    best_t = np.inf
    stall = 0
    for _ in range(max_steps):
        dist = np.minimum(np.linalg.norm(seeds - x, axis=1),
                          np.linalg.norm(snapped - x, axis=1))
        if dist.min() <= h:
            path.append(seeds[np.argmin(dist)])
            break
        k1 = velocity(x)
        k2 = None if k1 is None else velocity(x + 0.5 * h * k1)
        k3 = None if k2 is None else velocity(x + 0.5 * h * k2)
        k4 = None if k3 is None else velocity(x + h * k3)
        if k4 is None:
            # the field vanishes on the seed itself, which an RK stage can hit
            # exactly when the remaining distance is a multiple of h
            if dist.min() <= 2.0 * h:
                path.append(seeds[np.argmin(dist)])
                break
            raise TrappedBacktraceError(
                f"trapped backtrace: zero descent near voxel {grid.world_to_voxel(x)}")
        x = x + h * (k1 + 2 * k2 + 2 * k3 + k4) / 6.0
        path.append(x.copy())
        t = tval(x)
        if t < best_t - 1e-12:
            best_t = t
            stall = 0
        else:
            stall += 1
            if stall > 40:
                raise TrappedBacktraceError(
                    f"trapped backtrace: descent stalled near voxel {grid.world_to_voxel(x)}")
    else:
        raise TrappedBacktraceError(
            f"trapped backtrace: no seed reached near voxel {grid.world_to_voxel(x)}")
    pts = np.asarray(path[::-1])
    keep = np.concatenate([[True], np.linalg.norm(np.diff(pts, axis=0), axis=1) > 1e-9])
    return Centerline(pts[keep])


def smooth_polyline(points: np.ndarray, window: int = 5) -> np.ndarray:
    """Moving average with the endpoints held fixed and the window shrunk
    near the ends."""
    pts = np.asarray(points, dtype=float)
    if window <= 1 or len(pts) < 3:
        return pts.copy()
    half = window // 2
    out = pts.copy()
    for i in range(1, len(pts) - 1):
        r = min(half, i, len(pts) - 1 - i)
        out[i] = pts[i - r:i + r + 1].mean(axis=0)
    return out


def _normal_frame(t: np.ndarray):
    t = t / np.linalg.norm(t, axis=1, keepdims=True)
    ref = np.where(np.abs(t[:, :1]) < 0.9, [[1.0, 0.0, 0.0]], [[0.0, 1.0, 0.0]])
    u = np.cross(t, ref)
    u /= np.linalg.norm(u, axis=1, keepdims=True)
    return u, np.cross(t, u)


def recenter_polyline(points: np.ndarray, weight: VoxelGrid, radius_mm: float = 3.0,
                      iterations: int = 2, step_mm: float = 0.5) -> np.ndarray:
    """Move interior points to the centroid of the lumen cross-section.

    The polyline is resampled every ``step_mm``.  At each interior point the
    weight is sampled on a disc of ``radius_mm`` in the plane normal to the
    local tangent; the connected region with weight above one half that
    contains (or is nearest to) the point gives the weighted centroid.
    Endpoints stay fixed.  Minimum-cost paths on flat-topped speed maps hug
    the inner side of bends; this removes that bias.
    """
    pts = Centerline(points).resample(step_mm).points.copy()
    if iterations <= 0 or len(pts) < 3:
        return pts
    h = 0.5 * min(weight.spacing)
    ax = np.arange(-radius_mm, radius_mm + 1e-9, h)
    a, b = np.meshgrid(ax, ax, indexing="ij")
    disc = a**2 + b**2 <= radius_mm**2
    centre = (len(ax) // 2, len(ax) // 2)
    origin = np.asarray(weight.origin)
    spacing = np.asarray(weight.spacing)
    for _ in range(iterations):
        t = np.empty_like(pts)
        t[1:-1] = pts[2:] - pts[:-2]
        t[0] = pts[1] - pts[0]
        t[-1] = pts[-1] - pts[-2]
        u, v = _normal_frame(t)
        inner = pts[1:-1]
        q = (inner[:, None, None, :] + a[None, ..., None] * u[1:-1, None, None, :]
             + b[None, ..., None] * v[1:-1, None, None, :])
        c = ((q - origin) / spacing).reshape(-1, 3).T
        w = ndimage.map_coordinates(weight.values, c, order=1, mode="constant", cval=0.0)
        w = w.reshape(q.shape[:-1]) * disc
        new = inner.copy()
        for i in range(len(inner)):
            lab, n = ndimage.label(w[i] > 0.5)
            if n == 0:
                continue
            k = lab[centre]
            if k == 0:
                idx = np.argwhere(lab > 0)
                nearest = idx[np.argmin(np.sum((idx - centre) ** 2, axis=1))]
                k = lab[tuple(nearest)]
            sel = lab == k
            ws = w[i][sel]
            new[i] = (q[i][sel] * ws[:, None]).sum(axis=0) / ws.sum()
        pts[1:-1] = new
    return pts


@dataclass
class CenterlineResult:
    centerline: Centerline
    ml: float
    w_lumen: VoxelGrid
    speed: VoxelGrid
    arrival: ArrivalTimeField


def extract_centerline(grid: VoxelGrid, w_vessel: VoxelGrid, seeds: SeedPair,
                       cfg: ThresholdConfig | None = None,
                       ccfg: CenterlineConfig | None = None,
                       return_details: bool = False):
    """Minimum-cost path between the two seeds under ``V = w_vessel * w_lumen``."""
    cfg = cfg or ThresholdConfig()
    ccfg = ccfg or CenterlineConfig()
    grid = check_grid(grid, min_size=3)
    check_compatible(grid, w_vessel)
    seeds.check(grid)
    ml = compute_ml(grid, w_vessel, cfg)
    w_lumen = lumen_weight_map(grid, ml, cfg)
    speed = speed_map(w_vessel, w_lumen, ccfg.speed_floor)
    stop = seeds.end if ccfg.march_stop_factor > 0 else None
    arrival = fast_march(speed, [seeds.start], ccfg.fmm_order, ccfg.init_radius_voxels,
                         stop, ccfg.march_stop_factor)
    raw = backtrace_path(arrival, seeds.end, ccfg.step_voxels)
    pts = raw.points.copy()
    pts[0] = seeds.start
    pts[-1] = seeds.end
    if ccfg.recenter_iterations > 0:
        bell = w_lumen.with_values((w_lumen.values - 0.1) / 0.9)
        pts = recenter_polyline(pts, bell, ccfg.recenter_radius_mm,
                                ccfg.recenter_iterations, ccfg.recenter_step_mm)
    pts = smooth_polyline(pts, ccfg.smoothing_window)
    keep = np.concatenate([[True], np.linalg.norm(np.diff(pts, axis=0), axis=1) > 1e-9])
    line = Centerline(pts[keep])
    if return_details:
        return CenterlineResult(line, ml, w_lumen, speed, arrival)
    return line


def path_cost(speed: VoxelGrid, points: np.ndarray, step: float | None = None) -> float:
    """Line integral of ``1 / speed`` along a polyline (trilinear speed)."""
    line = Centerline(points)
    step = step or 0.25 * min(speed.spacing)
    fine = line.resample(step)
    c = ((fine.points - np.asarray(speed.origin)) / np.asarray(speed.spacing)).T
    v = ndimage.map_coordinates(speed.values, c, order=1, mode="nearest")
    inv = 1.0 / v
    seg = np.diff(fine.arclength)
    return float(np.sum(0.5 * (inv[1:] + inv[:-1]) * seg))


__all__ = [
    "ArrivalTimeField", "BoundsError", "Centerline", "CenterlineConfig", "SeedPair",
    "TrappedBacktraceError", "backtrace_path", "compute_ml", "extract_centerline",
    "fast_march", "lumen_weight_map", "path_cost", "recenter_polyline", "smooth_polyline",
    "speed_map",
]
