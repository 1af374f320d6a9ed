"""Sparse-field level-set evolution of a region (Chan-Vese) energy with a
shape prior and a labelling gate.

``phi`` is positive inside the segmented region.  Forces follow the
descent convention: a positive Chan-Vese or shape force shrinks the region.
Energies use the sharp Heaviside; forces use the smoothed one,
``Hs(z) = 1/2 (1 + 2/pi arctan(z / eps))``.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import ndimage
from sklearn.base import BaseEstimator

from . import _sfm
from .grid import BinaryMask, GridError, Lattice, VoxelGrid
from .validation import check_compatible, check_grid, check_mask

FAR = _sfm.FAR


class LevelSetError(RuntimeError):
    """Raised when the evolution breaks down (vanished contour, non-finite phi)."""


@dataclass
class LevelSetParams:
    curvature: float = 0.1
    iterations: int = 200
    data_weight: float = 1.0
    shape_weight: float = 0.2
    label_weight: float = 0.0
    time_step: float = 0.45
    heaviside_eps: float = 1.0
    roi: BinaryMask | None = field(default=None, repr=False)
    psi: VoxelGrid | None = field(default=None, repr=False)
    labels: VoxelGrid | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.iterations < 0:
            raise GridError("iterations must be >= 0")
        for name in ("curvature", "data_weight", "shape_weight", "label_weight"):
            if getattr(self, name) < 0:
                raise GridError(f"{name} must be >= 0")
        if not self.time_step > 0 or not self.heaviside_eps > 0:
            raise GridError("time_step and heaviside_eps must be positive")


@dataclass
class SparseFieldState:
    """Banded level-set state on a lattice."""

    lattice: Lattice
    phi: np.ndarray = field(repr=False)
    labels: np.ndarray = field(repr=False)
    c1: float = float("nan")
    c2: float = float("nan")
    iteration: int = 0

    @property
    def phi_grid(self) -> VoxelGrid:
        g = self.lattice
        return VoxelGrid(g.dims, g.spacing, g.origin, self.phi, "phi")

    def mask(self) -> BinaryMask:
        return BinaryMask.like(self.lattice, self.phi > 0)

    def layer(self, k: int) -> np.ndarray:
        """Linear (x-fastest) indices of layer ``k``, sorted."""
        return np.flatnonzero(np.ravel(self.labels == k, order="F"))

    def copy(self) -> "SparseFieldState":
        return replace(self, phi=self.phi.copy(), labels=self.labels.copy())


def _signed_layers(mask: np.ndarray):
    inside = ndimage.distance_transform_cdt(mask, metric="taxicab")
    outside = ndimage.distance_transform_cdt(~mask, metric="taxicab")
    d = np.where(mask, inside, -outside).astype(np.int64)
    # city-block distance 1 on either side of the boundary is the zero layer
    labels = np.sign(d) * np.minimum(np.abs(d) - 1, FAR)
    phi = np.sign(d) * np.minimum(np.abs(d) - 0.5, 2.5)
    return phi.astype(float), labels.astype(np.int8)


def init_from_mask(mask, u: VoxelGrid | None = None, roi=None) -> SparseFieldState:
    """Initial state from a binary mask.

    Layers come from the city-block distance to the mask boundary: voxels
    at distance 1 on either side form the zero layer (phi = +-0.5), then
    +-1 (phi = +-1.5), +-2 (phi = +-2.5) and far (+-3).
    """
    mask = check_mask(mask)
    m = np.asarray(mask.values, dtype=bool)
    if not m.any():
        raise GridError("initialization error: empty mask")
    if m.all():
        raise GridError("initialization error: mask fills the whole grid")
    phi, labels = _signed_layers(m)
    state = SparseFieldState(Lattice(mask.dims, mask.spacing, mask.origin), phi, labels)
    if u is not None:
        check_compatible(mask, u)
        r = np.ones(mask.dims, bool) if roi is None else np.asarray(check_mask(roi).values)
        state.c1, state.c2, _, _ = _sfm.region_means(phi, np.asarray(u.values), r)
    return state


def heaviside(z, eps: float = 1.0):
    return 0.5 * (1.0 + (2.0 / np.pi) * np.arctan(np.asarray(z, dtype=float) / eps))


def dirac(z, eps: float = 1.0):
    z = np.asarray(z, dtype=float)
    return (eps / np.pi) / (eps**2 + z**2)


def chan_vese_force(u, c1, c2):
    """``(u - c1)^2 - (u - c2)^2``; positive values shrink the inside."""
    u = np.asarray(u, dtype=float)
    return (u - c1) ** 2 - (u - c2) ** 2


def shape_force(phi_v, psi_v, lab_v, eps: float = 1.0):
    """Descent force of the prior term, gated by the (sharp) label."""
    hl = (np.asarray(lab_v) > 0).astype(float)
    return 2.0 * (heaviside(phi_v, eps) * hl - heaviside(psi_v, eps)) * hl * dirac(phi_v, eps)


def _roi_values(params: LevelSetParams, dims) -> np.ndarray:
    if params.roi is None:
        return np.ones(dims, dtype=bool)
    return np.asarray(params.roi.values, dtype=bool)


def _label_values(params: LevelSetParams, roi: np.ndarray) -> np.ndarray:
    if params.labels is not None:
        return np.asarray(params.labels.values, dtype=float)
    return np.where(roi, 1.0, -1.0)


def labeling_energy(u, psi, c1, c2, roi=None) -> float:
    """Region misfit of the prior partition ``psi > 0``."""
    u = np.asarray(getattr(u, "values", u), dtype=float)
    psi = np.asarray(getattr(psi, "values", psi), dtype=float)
    h = (psi > 0).astype(float)
    e = (u - c1) ** 2 * h + (u - c2) ** 2 * (1.0 - h)
    if roi is not None:
        e = e[np.asarray(getattr(roi, "values", roi), dtype=bool)]
    return float(e.sum())


def total_energy(state: SparseFieldState, u: VoxelGrid, params: LevelSetParams | None = None,
                 components: bool = False):
    """Weighted sum of the region, shape and labelling energies over the ROI."""
    params = params or LevelSetParams()
    uv = np.asarray(u.values, dtype=float)
    roi = _roi_values(params, state.lattice.dims)
    inside = (state.phi > 0) & roi
    outside = (state.phi <= 0) & roi
    c1 = uv[inside].mean() if inside.any() else 0.0
    c2 = uv[outside].mean() if outside.any() else 0.0
    e_cv = float(((uv[inside] - c1) ** 2).sum() + ((uv[outside] - c2) ** 2).sum())
    e_shape = 0.0
    e_label = 0.0
    if params.psi is not None:
        hl = _label_values(params, roi) > 0
        hpsi = np.asarray(params.psi.values) > 0
        resid = ((state.phi > 0) & hl).astype(float) - hpsi
        e_shape = float((resid[roi] ** 2).sum())
        e_label = labeling_energy(uv, params.psi, c1, c2, roi)
    total = (params.data_weight * e_cv + params.shape_weight * e_shape
             + params.label_weight * e_label)
    if components:
        return total, {"chan_vese": e_cv, "shape": e_shape, "labeling": e_label}
    return total


def _crop_box(roi: np.ndarray, labels: np.ndarray, margin: int = 3):
    """Bounding box of the ROI and the band, padded by ``margin``.  Zero-layer
    voxels outside the ROI are pushed out, so the band never reaches past it
    by more than two voxels."""
    if roi.all():
        return tuple(slice(0, n) for n in roi.shape)
    idx = np.argwhere(roi | (np.abs(labels) < FAR))
    lo = np.maximum(idx.min(axis=0) - margin, 0)
    hi = np.minimum(idx.max(axis=0) + margin + 1, roi.shape)
    return tuple(slice(int(a), int(b)) for a, b in zip(lo, hi))


def evolve(state: SparseFieldState, u: VoxelGrid, params: LevelSetParams | None = None,
           trace=None) -> SparseFieldState:
    """Run ``params.iterations`` sparse-field passes; returns a new state.

    Parameters
    ----------
    state : SparseFieldState
    u : VoxelGrid
        Data image driving the Chan-Vese term.
    params : LevelSetParams
    trace : str, path or list, optional
        When given, the total energy after every iteration is appended to
        the list or written as CSV (iteration, energy, c1, c2).

    Raises
    ------
    LevelSetError
        If the zero layer vanishes or phi becomes non-finite.
    """
    params = params or LevelSetParams()
    u = check_grid(u)
    check_compatible(state.lattice, u)
    for g in (params.roi, params.psi, params.labels):
        if g is not None:
            check_compatible(state.lattice, g)
    out = state.copy()
    if params.iterations == 0:
        return out
    dims = state.lattice.dims
    roi = _roi_values(params, dims)
    box = _crop_box(roi, out.labels)
    phi = np.ascontiguousarray(out.phi[box])
    labels = np.ascontiguousarray(out.labels[box])
    uv = np.ascontiguousarray(np.asarray(u.values, dtype=float)[box])
    roi_c = np.ascontiguousarray(roi[box])
    use_shape = params.psi is not None and params.shape_weight > 0
    psi = (np.ascontiguousarray(np.asarray(params.psi.values, dtype=float)[box])
           if params.psi is not None else np.zeros_like(phi))
    lab = np.ascontiguousarray(_label_values(params, roi)[box])

    def run(n):
        return _sfm.evolve_kernel(phi, labels, uv, roi_c, psi, lab, use_shape,
                                  float(params.curvature), float(params.data_weight),
                                  float(params.shape_weight), float(params.time_step),
                                  float(params.heaviside_eps), int(n))

    rows = []
    if trace is None:
        status, done, c1, c2 = run(params.iterations)
    else:
        done = 0
        status = _sfm.OK
        c1 = c2 = float("nan")
        while done < params.iterations:
            status, n, c1, c2 = run(1)
            done += n
            if status != _sfm.OK:
                break
            out.phi[box] = phi
            out.labels[box] = labels
            rows.append((done, total_energy(out, u, params), c1, c2))
    if status == _sfm.VANISHED:
        raise LevelSetError(f"contour vanished at iteration {state.iteration + done}")
    if status == _sfm.NONFINITE:
        raise LevelSetError(f"non-finite phi at iteration {state.iteration + done}")
    out.phi[box] = phi
    out.labels[box] = labels
    out.c1, out.c2 = float(c1), float(c2)
    out.iteration = state.iteration + done
    if trace is not None:
        if isinstance(trace, list):
            trace.extend(rows)
        else:
            with open(trace, "w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(["iteration", "energy", "c1", "c2"])
                w.writerows(rows)
    return out


def validate_state(state: SparseFieldState) -> list:
    """Return a list of violated layer invariants (empty when valid)."""
    problems = []
    phi, lab = state.phi, state.labels
    if np.any(np.abs(phi) > 2.5 + 1e-12):
        problems.append("phi outside [-2.5, 2.5]")
    a = np.abs(phi)
    z = lab == 0
    if np.any(a[z] > 0.5 + 1e-12):
        problems.append("zero layer with |phi| > 0.5")
    for k in (1, 2):
        for s in (1, -1):
            sel = lab == s * k
            if sel.any():
                v = phi[sel] * s
                if np.any(v <= k - 0.5) or np.any(v > k + 0.5 + 1e-12):
                    problems.append(f"layer {s * k} outside its phi interval")
    for s in (1, -1):
        sel = lab == s * FAR
        if sel.any() and np.any(phi[sel] * s <= 0):
            problems.append(f"far layer {s * FAR} with wrong sign")
    if z.any():
        pad = np.pad(phi, 1, mode="edge")
        core = (slice(1, -1),) * 3
        cross = np.zeros(phi.shape, dtype=bool)
        for ax in range(3):
            for sh in (1, -1):
                nb = np.roll(pad, sh, axis=ax)[core]
                # edge padding makes out-of-grid neighbours equal to the voxel
                cross |= nb * phi <= 0
        if np.any(~cross[z]):
            problems.append("zero-layer voxel without a neighbouring sign change")
    return problems


class SparseFieldLevelSet(BaseEstimator):
    """Estimator wrapper: ``fit(u, init_mask)`` evolves, ``predict`` returns
    the segmented mask."""

    def __init__(self, curvature=0.1, iterations=200, data_weight=1.0, shape_weight=0.2,
                 label_weight=0.0, time_step=0.45, heaviside_eps=1.0):
        self.curvature = curvature
        self.iterations = iterations
        self.data_weight = data_weight
        self.shape_weight = shape_weight
        self.label_weight = label_weight
        self.time_step = time_step
        self.heaviside_eps = heaviside_eps

    def fit(self, u, init_mask, roi=None, psi=None, labels=None):
        u = check_grid(u)
        params = LevelSetParams(**self.get_params(), roi=roi, psi=psi, labels=labels)
        state = init_from_mask(check_mask(init_mask, like=u), u, roi)
        self.params_ = params
        self.state_ = evolve(state, u, params)
        return self

    def predict(self, u=None) -> BinaryMask:
        return self.state_.mask()


__all__ = [
    "LevelSetError", "LevelSetParams", "SparseFieldLevelSet", "SparseFieldState",
    "chan_vese_force", "dirac", "evolve", "heaviside", "init_from_mask", "labeling_energy",
    "shape_force", "total_energy", "validate_state",
]
