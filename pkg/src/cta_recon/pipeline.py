"""Stage orchestration: vesselness, centerline, memberships, then lumen,
outer-wall and calcified-plaque level sets, followed by containment repair.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator

from . import config as config_mod
from .centerline import Centerline, SeedPair, extract_centerline
from .config import PipelineConfig
from .grid import (BinaryMask, BoundsError, GridError, VoxelGrid, dilate,
                   distance_to_polyline, polyline_projection)
from .levelset import LevelSetError, evolve, init_from_mask
from .membership import TissueFields, binarize_initial_phi, gated_memberships
from .validation import check_compatible, check_grid
from .vesselness import frangi_vesselness


class StageError(RuntimeError):
    """A pipeline stage failed; ``stage`` names it and ``__cause__`` holds the reason."""

    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"stage '{stage}' failed: {cause}")
        self.stage = stage
        self.cause = cause


@dataclass
class SegmentationResult:
    phi_lumen: VoxelGrid
    phi_outer: VoxelGrid
    phi_plaque: VoxelGrid
    lumen_mask: BinaryMask
    outer_mask: BinaryMask
    plaque_mask: BinaryMask
    centerline: Centerline
    mean_intensity: float
    provenance: dict = field(default_factory=dict)
    vesselness: VoxelGrid | None = field(default=None, repr=False)
    tissue: TissueFields | None = field(default=None, repr=False)


def _mm_to_vox(mm: float, grid) -> float:
    return mm / grid.spacing[0]


def make_tube_prior(line, radius_mm: float, grid) -> VoxelGrid:
    """``psi = radius - distance`` (mm); positive inside the tube."""
    if not radius_mm > 0:
        raise GridError("tube radius must be positive")
    d = distance_to_polyline(grid, line)
    return VoxelGrid(grid.dims, grid.spacing, grid.origin,
                     radius_mm - d.values * grid.spacing[0], "phi")


def segment_window(grid, line, margin_mm: float = 0.0) -> np.ndarray:
    """Voxels whose projection on the centerline falls between the seeds."""
    pts = np.stack([a.ravel() for a in np.broadcast_arrays(*grid.world_coordinates())], axis=1)
    _, s = polyline_projection(pts, getattr(line, "points", line))
    length = Centerline(getattr(line, "points", line)).length
    return ((s >= -margin_mm) & (s <= length + margin_mm)).reshape(grid.dims)


def _state_phi(state, grid) -> VoxelGrid:
    return VoxelGrid(grid.dims, grid.spacing, grid.origin, state.phi, "phi")


def _run_pass(init: np.ndarray, u: VoxelGrid, roi: np.ndarray, params, psi=None):
    roi_mask = BinaryMask.like(u, roi)
    state = init_from_mask(BinaryMask.like(u, init & roi), u, roi_mask)
    return evolve(state, u, params.as_levelset(roi=roi_mask, psi=psi))


def _stage_rois(grid, tissue: TissueFields, cfg: PipelineConfig, window):
    gate = tissue.d1.values <= cfg.thresholds.lumen_radius_cutoff / grid.spacing[0]
    return gate & window


def segment_lumen(grid: VoxelGrid, line, tissue: TissueFields, cfg: PipelineConfig | None = None,
                  window: np.ndarray | None = None, details: dict | None = None) -> VoxelGrid:
    """Two-pass lumen level set on ``u = wi * f1`` inside the gated ROI."""
    cfg = cfg or PipelineConfig()
    if window is None:
        window = np.ones(grid.dims, bool)
    th = cfg.thresholds
    roi = _stage_rois(grid, tissue, cfg, window)
    init = binarize_initial_phi(tissue.f1, th).values & roi
    if not init.any():
        raise GridError("empty initialization: no lumen voxel inside the ROI")
    u = grid.with_values(th.wi * tissue.f1.values, kind="intensity")
    psi = make_tube_prior(line, cfg.regions.prior_tube_radius_mm, grid)
    s1 = _run_pass(init, u, roi, cfg.stages.lumen_pass1, psi)
    m1 = s1.phi > 0
    roi2 = dilate(m1, cfg.regions.pass2_band_voxels) & roi
    s2 = _run_pass(m1, u, roi2, cfg.stages.lumen_pass2, psi)
    if details is not None:
        details["lumen_pass1"] = _state_phi(s1, grid)
        details["lumen_init"] = init
    return _state_phi(s2, grid)


def outer_initial_mask(tissue: TissueFields, phi_lumen: VoxelGrid, cfg: PipelineConfig):
    th = cfg.thresholds
    f = np.clip(tissue.f2_outer.values + tissue.f2_plaque.values, 0.0, 1.0)
    return (f * th.wi > th.wi / 2) | (phi_lumen.values > 0)


def segment_outer_wall(grid: VoxelGrid, phi_lumen: VoxelGrid, tissue: TissueFields,
                       cfg: PipelineConfig | None = None, window: np.ndarray | None = None,
                       details: dict | None = None) -> VoxelGrid:
    """Two-pass outer-wall level set on HU capped from above, inside the
    dilated lumen band."""
    cfg = cfg or PipelineConfig()
    if window is None:
        window = np.ones(grid.dims, bool)
    base = phi_lumen.values > -0.1
    roi = dilate(base, _mm_to_vox(cfg.regions.outer_roi_dilation_mm, grid))
    roi &= _stage_rois(grid, tissue, cfg, window)
    init = outer_initial_mask(tissue, phi_lumen, cfg) & roi
    u = grid.with_values(np.minimum(grid.values, cfg.regions.outer_intensity_cap))
    s1 = _run_pass(init, u, roi, cfg.stages.outer_pass1)
    m1 = s1.phi > 0
    roi2 = dilate(m1, cfg.regions.pass2_band_voxels) & roi
    s2 = _run_pass(m1, u, roi2, cfg.stages.outer_pass2)
    if details is not None:
        details["outer_roi"] = roi
        details["outer_init"] = init
    return _state_phi(s2, grid)


def _empty_phi(grid) -> VoxelGrid:
    return VoxelGrid(grid.dims, grid.spacing, grid.origin, np.full(grid.dims, -2.5), "phi")


def segment_plaques(grid: VoxelGrid, phi_outer: VoxelGrid, tissue: TissueFields,
                    cfg: PipelineConfig | None = None) -> VoxelGrid:
    """Single-pass plaque level set on HU within the outer wall.  An empty
    initialization yields an explicitly empty result."""
    cfg = cfg or PipelineConfig()
    roi = phi_outer.values > 0
    init = binarize_initial_phi(tissue.f2_plaque, cfg.thresholds, allow_empty=True).values & roi
    if not init.any() or init.all() or roi.sum() == init.sum():
        return _empty_phi(grid)
    try:
        s = _run_pass(init, grid, roi, cfg.stages.plaque)
    except LevelSetError as exc:
        if "vanished" in str(exc):
            return _empty_phi(grid)
        raise
    return _state_phi(s, grid)


def containment_repair(lumen: np.ndarray, outer: np.ndarray, plaque: np.ndarray):
    """Enforce lumen, plaque within outer and plaque disjoint from lumen."""
    plaque = plaque & ~lumen
    outer = outer | lumen | plaque
    return lumen, outer, plaque


def _stage(name, timings, fn, *args, **kw):
    t0 = time.perf_counter()
    try:
        out = fn(*args, **kw)
    except (BoundsError, StageError):
        raise
    except Exception as exc:
        raise StageError(name, exc) from exc
    timings[name] = round(1000.0 * (time.perf_counter() - t0), 3)
    return out


def run_pipeline(volume: VoxelGrid, seeds: SeedPair, cfg: PipelineConfig | None = None,
                 keep_intermediates: bool = False) -> SegmentationResult:
    """Vesselness, centerline, memberships, lumen, outer wall, plaque."""
    cfg = cfg or PipelineConfig()
    volume = check_grid(volume, min_size=3)
    if not isinstance(seeds, SeedPair):
        seeds = SeedPair(*seeds)
    seeds.check(volume)
    timings = {}
    w = _stage("vesselness", timings, frangi_vesselness, volume, cfg.frangi)
    line = _stage("centerline", timings, extract_centerline, volume, w, seeds,
                  cfg.thresholds, cfg.centerline)
    tissue = _stage("memberships", timings, gated_memberships, volume, line, cfg.thresholds)
    window = np.ones(volume.dims, bool)
    if cfg.regions.clip_to_segment:
        window = segment_window(volume, line, cfg.regions.end_margin_mm)
    phi_l = _stage("lumen", timings, segment_lumen, volume, line, tissue, cfg, window)
    phi_o = _stage("outer_wall", timings, segment_outer_wall, volume, phi_l, tissue, cfg, window)
    phi_p = _stage("plaque", timings, segment_plaques, volume, phi_o, tissue, cfg)
    lumen, outer, plaque = containment_repair(phi_l.values > 0, phi_o.values > 0,
                                              phi_p.values > 0)
    provenance = {
        "config": config_mod.to_dict(cfg),
        "seeds": {"start": list(seeds.start), "end": list(seeds.end)},
        "timings_ms": timings,
        "mean_lumen_intensity": tissue.mean_intensity,
    }
    return SegmentationResult(
        phi_lumen=phi_l, phi_outer=phi_o, phi_plaque=phi_p,
        lumen_mask=BinaryMask.like(volume, lumen),
        outer_mask=BinaryMask.like(volume, outer),
        plaque_mask=BinaryMask.like(volume, plaque),
        centerline=line, mean_intensity=tissue.mean_intensity, provenance=provenance,
        vesselness=w if keep_intermediates else None,
        tissue=tissue if keep_intermediates else None,
    )


class CoronarySegmenter(BaseEstimator):
    """Estimator facade over :func:`run_pipeline`.

    Parameters
    ----------
    config : PipelineConfig, dict or None
        ``None`` uses the defaults; a dict is read like a TOML config.

    Examples
    --------
    >>> seg = CoronarySegmenter().fit(volume, seeds)      # doctest: +SKIP
    >>> seg.predict()["lumen"].count                        # doctest: +SKIP
    """

    def __init__(self, config=None):
        self.config = config

    def _config(self) -> PipelineConfig:
        if self.config is None:
            return PipelineConfig()
        if isinstance(self.config, dict):
            return config_mod.from_dict(self.config)
        if isinstance(self.config, PipelineConfig):
            return self.config
        raise GridError(f"config must be a PipelineConfig or dict, got {type(self.config)}")

    def fit(self, X, seeds):
        self.result_ = run_pipeline(X, seeds, self._config())
        return self

    def predict(self, X=None) -> dict:
        r = self.result_
        if X is not None:
            check_compatible(X, r.lumen_mask)
        return {"lumen": r.lumen_mask, "outer": r.outer_mask, "plaque": r.plaque_mask}

    def score(self, X, truth_lumen) -> float:
        from .metrics import dice

        return dice(self.predict(X)["lumen"], truth_lumen)


__all__ = [
    "CoronarySegmenter", "SegmentationResult", "StageError", "containment_repair",
    "make_tube_prior", "outer_initial_mask", "run_pipeline", "segment_lumen",
    "segment_outer_wall", "segment_plaques", "segment_window",
]
