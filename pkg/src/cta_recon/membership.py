"""Tissue membership fields for lumen, outer wall and calcified plaque.

All intensities are in HU.  Distances (``d1``) are in in-plane voxel units,
so a radius of ``r`` mm corresponds to ``r / p_x`` voxels where ``p_x`` is
the x spacing.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .grid import BinaryMask, GridError, VoxelGrid, distance_to_polyline
from .validation import check_compatible


class EmptySelectionError(ValueError):
    """Raised when a sample set used for an estimate is empty."""


@dataclass
class ThresholdConfig:
    l_thres: float = 80.0
    cp_thres: float = 400.0
    ncp_thres: float = 50.0
    epsilon: float = 0.05
    wi: float = 1000.0
    # radii in mm; divided by p_x to get voxel units
    lumen_radius_cutoff: float = 4.0
    lumen_gate_center: float = 2.0
    wall_gate_center: float = 2.5
    gate_slope: float = -0.5
    candidate_hu_floor: float = 100.0
    candidate_distance: float = 5.0
    lumen_width_min: float = 150.0
    lumen_width_max: float = 500.0
    outer_center_min: float = 100.0
    outer_center_max: float = 200.0
    outer_slope: float = 0.02
    plaque_slope: float = 0.05
    bell_exponent: float = 4.0

    def __post_init__(self):
        for name in ("l_thres", "cp_thres", "ncp_thres", "wi", "lumen_radius_cutoff",
                     "candidate_distance"):
            if not getattr(self, name) > 0:
                raise GridError(f"{name} must be positive")
        if not 0 < self.epsilon < 1:
            raise GridError("epsilon must lie in (0, 1)")
        if self.bell_exponent < 1:
            raise GridError("bell_exponent must be >= 1")


@dataclass
class MembershipParams:
    kind: str
    center: float
    width: float
    exponent: float | None = None

    def __post_init__(self):
        if self.kind == "bell" and not self.width > 0:
            raise GridError("bell half_width must be positive")
        if self.kind == "sigmoid" and self.width == 0:
            raise GridError("sigmoid slope must be nonzero")

    def __call__(self, x):
        if self.kind == "bell":
            return bell(x, self.center, self.width, self.exponent)
        return sigmoid(x, self.width, self.center)


@dataclass
class TissueFields:
    f_lumen: VoxelGrid
    f_outer: VoxelGrid
    f_plaque: VoxelGrid
    f1: VoxelGrid | None = None
    f2_outer: VoxelGrid | None = None
    f2_plaque: VoxelGrid | None = None
    d1: VoxelGrid | None = None
    mean_intensity: float | None = None
    params: dict | None = None


def bell(x, center, half_width, exponent):
    """Generalized bell: 1 at ``center``, 0.5 at ``center +- half_width``."""
    if not half_width > 0:
        raise GridError("half_width must be positive")
    if exponent < 1:
        raise GridError("exponent must be >= 1")
    z = np.abs((np.asarray(x, dtype=float) - center) / half_width)
    with np.errstate(over="ignore"):
        return 1.0 / (1.0 + z ** (2.0 * exponent))


def sigmoid(x, slope, center):
    if slope == 0:
        raise GridError("slope must be nonzero")
    arg = -slope * (np.asarray(x, dtype=float) - center)
    with np.errstate(over="ignore"):
        return 1.0 / (1.0 + np.exp(arg))


def band_bell(lower: float, upper: float, exponent: float) -> MembershipParams:
    """Bell whose half-height crossings sit at ``lower`` and ``upper``."""
    if not upper > lower:
        raise GridError(f"empty intensity band [{lower}, {upper}]")
    return MembershipParams("bell", 0.5 * (lower + upper), 0.5 * (upper - lower), exponent)


def membership_params(mean_intensity: float, cfg: ThresholdConfig) -> dict:
    """Parameters of the three tissue membership functions for a given mean
    lumen intensity."""
    m = float(mean_intensity)
    lower = min(max(m - cfg.l_thres, cfg.lumen_width_min), cfg.lumen_width_max)
    return {
        "lumen": band_bell(lower, m + cfg.cp_thres, cfg.bell_exponent),
        "outer": MembershipParams(
            "sigmoid",
            min(cfg.outer_center_max, max(m - cfg.l_thres - cfg.ncp_thres, cfg.outer_center_min)),
            cfg.outer_slope,
        ),
        "plaque": MembershipParams("sigmoid", m + cfg.cp_thres, cfg.plaque_slope),
    }


def mean_lumen_intensity(grid: VoxelGrid, line, cfg: ThresholdConfig | None = None,
                         d1: VoxelGrid | None = None) -> float:
    """Mean HU over voxels brighter than the candidate floor and within
    ``candidate_distance`` voxels of the centerline."""
    cfg = cfg or ThresholdConfig()
    if d1 is None:
        d1 = distance_to_polyline(grid, line)
    check_compatible(grid, d1)
    sel = (grid.values > cfg.candidate_hu_floor) & (d1.values < cfg.candidate_distance)
    if not sel.any():
        raise EmptySelectionError("lumen sample empty: no bright voxels near the centerline")
    return float(grid.values[sel].mean())


def tissue_memberships(grid: VoxelGrid, mean_intensity: float,
                       cfg: ThresholdConfig | None = None) -> TissueFields:
    """Ungated membership fields, each mapped through ``(1 - eps) * g + eps``."""
    cfg = cfg or ThresholdConfig()
    if not np.isfinite(mean_intensity):
        raise GridError("mean intensity must be finite")
    params = membership_params(mean_intensity, cfg)
    eps = cfg.epsilon

    def field(p):
        return grid.with_values((1 - eps) * p(grid.values) + eps, kind="membership")

    return TissueFields(
        f_lumen=field(params["lumen"]),
        f_outer=field(params["outer"]),
        f_plaque=field(params["plaque"]),
        mean_intensity=float(mean_intensity),
        params=params,
    )


def gate_by_distance(f: VoxelGrid, d1: VoxelGrid, tissue: str,
                     cfg: ThresholdConfig | None = None) -> VoxelGrid:
    """Multiply a membership by a decaying distance sigmoid and zero it
    beyond the lumen radius cutoff."""
    cfg = cfg or ThresholdConfig()
    check_compatible(f, d1)
    px = d1.spacing[0]
    center = cfg.lumen_gate_center if tissue == "lumen" else cfg.wall_gate_center
    gated = f.values * sigmoid(d1.values, cfg.gate_slope, center / px)
    gated[d1.values > cfg.lumen_radius_cutoff / px] = 0.0
    return f.with_values(gated, kind="membership")


def gated_memberships(grid: VoxelGrid, line, cfg: ThresholdConfig | None = None,
                      d1: VoxelGrid | None = None) -> TissueFields:
    """Mean lumen intensity, memberships and their distance-gated variants."""
    cfg = cfg or ThresholdConfig()
    if d1 is None:
        d1 = distance_to_polyline(grid, line)
    mean = mean_lumen_intensity(grid, line, cfg, d1=d1)
    tf = tissue_memberships(grid, mean, cfg)
    tf.d1 = d1
    tf.f1 = gate_by_distance(tf.f_lumen, d1, "lumen", cfg)
    tf.f2_outer = gate_by_distance(tf.f_outer, d1, "outer", cfg)
    tf.f2_plaque = gate_by_distance(tf.f_plaque, d1, "plaque", cfg)
    return tf


def binarize_initial_phi(f_gated, cfg: ThresholdConfig | None = None, allow_empty=False):
    """Foreground where ``f * wi > wi / 2`` (strict)."""
    cfg = cfg or ThresholdConfig()
    values = f_gated.values if isinstance(f_gated, VoxelGrid) else np.asarray(f_gated)
    mask = values * cfg.wi > cfg.wi / 2
    if not mask.any() and not allow_empty:
        raise EmptySelectionError("empty initialization: no voxel exceeds wi/2")
    if isinstance(f_gated, VoxelGrid):
        return BinaryMask.like(f_gated, mask)
    return BinaryMask(mask.shape, values=mask)
