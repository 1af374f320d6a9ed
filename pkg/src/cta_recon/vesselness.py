"""Multiscale Hessian vesselness (Frangi) for bright tubular structures."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from .grid import GridError, VoxelGrid, hessian_field
from .validation import check_grid


@dataclass
class FrangiParams:
    scales_mm: list = field(default_factory=lambda: [1.0, 1.5, 2.0, 2.5, 3.0])
    alpha: float = 0.5
    beta: float = 0.5
    gamma: float | str = "auto"
    bright_tubes: bool = True

    def __post_init__(self):
        scales = [float(s) for s in self.scales_mm]
        if not scales or any(b <= a for a, b in zip(scales, scales[1:])) or scales[0] <= 0:
            raise GridError(f"scales_mm must be non-empty, positive and strictly ascending: {scales}")
        if self.alpha <= 0 or self.beta <= 0:
            raise GridError("alpha and beta must be positive")
        if self.gamma != "auto" and not float(self.gamma) > 0:
            raise GridError("gamma must be positive or 'auto'")
        self.scales_mm = scales


def sorted_eigenvalues(h: dict) -> np.ndarray:
    """Eigenvalues of the per-voxel symmetric Hessian sorted by magnitude.

    Ties in magnitude keep ascending signed order, so the result is
    deterministic.  Shape ``(..., 3)``.
    """
    mat = np.empty(h["xx"].shape + (3, 3))
    mat[..., 0, 0] = h["xx"]
    mat[..., 1, 1] = h["yy"]
    mat[..., 2, 2] = h["zz"]
    mat[..., 0, 1] = mat[..., 1, 0] = h["xy"]
    mat[..., 0, 2] = mat[..., 2, 0] = h["xz"]
    mat[..., 1, 2] = mat[..., 2, 1] = h["yz"]
    lam = np.linalg.eigvalsh(mat)
    order = np.argsort(np.abs(lam), axis=-1, kind="stable")
    return np.take_along_axis(lam, order, axis=-1)


def frangi_response(lam: np.ndarray, alpha: float, beta: float, gamma, bright: bool = True):
    """Single-scale Frangi measure from magnitude-sorted eigenvalues."""
    l1, l2, l3 = lam[..., 0], lam[..., 1], lam[..., 2]
    if not bright:
        l1, l2, l3 = -l1, -l2, -l3
    a2, a3 = np.abs(l2), np.abs(l3)
    with np.errstate(divide="ignore", invalid="ignore"):
        ra = np.where(a3 > 0, a2 / a3, 0.0)
        rb = np.where(a2 * a3 > 0, np.abs(l1) / np.sqrt(a2 * a3), 0.0)
    s = np.sqrt(l1**2 + l2**2 + l3**2)
    if gamma == "auto":
        gamma = 0.5 * s.max()
    if gamma <= 0:
        return np.zeros_like(s)
    v = (
        (1.0 - np.exp(-(ra**2) / (2 * alpha**2)))
        * np.exp(-(rb**2) / (2 * beta**2))
        * (1.0 - np.exp(-(s**2) / (2 * gamma**2)))
    )
    v[(l2 > 0) | (l3 > 0)] = 0.0
    return np.clip(v, 0.0, 1.0)


def frangi_vesselness(grid: VoxelGrid, params: FrangiParams | None = None) -> VoxelGrid:
    """Maximum Frangi response over scales, as a weight grid in [0, 1]."""
    params = params or FrangiParams()
    grid = check_grid(grid, min_size=3)
    out = np.zeros(grid.dims)
    for sigma in params.scales_mm:
        lam = sorted_eigenvalues(hessian_field(grid, sigma))
        np.maximum(out, frangi_response(lam, params.alpha, params.beta, params.gamma,
                                        params.bright_tubes), out=out)
    return grid.with_values(out, kind="weight")


class FrangiVesselness(TransformerMixin, BaseEstimator):
    """Estimator wrapper around :func:`frangi_vesselness`.

    Stateless: ``fit`` only validates parameters, so it composes in
    pipelines that expect a fit/transform pair.
    """

    def __init__(self, scales_mm=(1.0, 1.5, 2.0, 2.5, 3.0), alpha=0.5, beta=0.5,
                 gamma="auto", bright_tubes=True):
        self.scales_mm = scales_mm
        self.alpha = alpha
        self.beta = beta
        self.gamma = gamma
        self.bright_tubes = bright_tubes

    def _params(self) -> FrangiParams:
        return FrangiParams(list(self.scales_mm), self.alpha, self.beta, self.gamma,
                            self.bright_tubes)

    def fit(self, X, y=None):
        self.params_ = self._params()
        return self

    def transform(self, X) -> VoxelGrid:
        params = getattr(self, "params_", None) or self._params()
        return frangi_vesselness(check_grid(X), params)
