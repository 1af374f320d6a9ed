"""Overlap, surface distance and cross-sectional vessel geometry.

Cross-sections are taken every 0.5 mm of centerline arclength on planes
normal to the local tangent.  Areas count in-plane samples at a quarter of
the smallest voxel spacing, with trilinear interpolation of the mask and a
0.5 threshold.  Degree of stenosis and plaque burden follow from the
section table.
"""
from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .centerline import Centerline, _normal_frame
from .grid import GridError, Lattice
from .validation import check_compatible, check_mask

REPORT_SCHEMA = 1


class MetricError(ValueError):
    """Metric undefined for the given input (empty mask, too few sections)."""


def _as_mask(m, like=None):
    if isinstance(m, np.ndarray):
        if m.ndim != 3:
            raise GridError("masks must be 3-D")
        return np.asarray(m, dtype=bool), (1.0, 1.0, 1.0)
    m = check_mask(m)
    if like is not None and not isinstance(like, np.ndarray):
        check_compatible(m, like)
    return np.asarray(m.values, dtype=bool), tuple(m.spacing)


def dice(a, b) -> float:
    """``2|A and B| / (|A| + |B|)``; two empty masks count as perfect agreement."""
    ma, _ = _as_mask(a, b)
    mb, _ = _as_mask(b, a)
    if ma.shape != mb.shape:
        raise GridError(f"mask shapes differ: {ma.shape} vs {mb.shape}")
    total = int(ma.sum()) + int(mb.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.count_nonzero(ma & mb)) / total


def directed_hausdorff(a, b, spacing=None) -> float:
    """``max over a in A of min over b in B of |a - b|`` in mm."""
    ma, sp = _as_mask(a, b)
    mb, _ = _as_mask(b, a)
    sp = np.asarray(spacing if spacing is not None else sp, dtype=float)
    if not ma.any() or not mb.any():
        raise MetricError("hausdorff distance needs two non-empty masks")
    # exact Euclidean transform; the distance is recomputed from the
    # nearest-voxel index so it is the same expression as a direct search
    _, idx = ndimage.distance_transform_edt(~mb, sampling=sp, return_indices=True)
    pts = np.argwhere(ma)
    near = idx[:, pts[:, 0], pts[:, 1], pts[:, 2]].T
    d2 = (((pts - near) * sp) ** 2).sum(axis=1)
    return float(np.sqrt(d2.max()))


def hausdorff(a, b, spacing=None) -> float:
    """Symmetric Hausdorff distance (mm) between the voxel sets of two masks."""
    return max(directed_hausdorff(a, b, spacing), directed_hausdorff(b, a, spacing))


@dataclass(frozen=True)
class CrossSection:
    arclength: float
    lumen_area: float
    outer_area: float
    min_diameter: float
    normal: tuple
    excluded: bool = False

    @property
    def plaque_burden(self) -> float:
        return plaque_burden(self)


@dataclass(frozen=True)
class SectionParams:
    step_mm: float = 0.5
    supersample: int = 4
    half_width_mm: float = 6.0
    directions: int = 180
    tangent_window_mm: float = 1.0
    # a section picks the region containing its centre, or the nearest one
    # within this distance
    capture_mm: float = 2.0

    def __post_init__(self):
        if not self.step_mm > 0 or self.supersample < 1 or self.directions < 1:
            raise GridError("invalid section sampling parameters")


def _plane_samples(lattice: Lattice, values, p, u, v, ax):
    a, b = np.meshgrid(ax, ax, indexing="ij")
    q = p + a[..., None] * u + b[..., None] * v
    c = (q - np.asarray(lattice.origin)) / np.asarray(lattice.spacing)
    hi = np.asarray(lattice.dims) - 1
    outside = np.any((c < 0) | (c > hi), axis=-1)
    img = ndimage.map_coordinates(values, c.reshape(-1, 3).T, order=1, mode="nearest")
    return img.reshape(a.shape), outside


def _pick_region(img, h, capture_mm):
    lab, n = ndimage.label(img >= 0.5)
    if n == 0:
        return np.zeros(img.shape, bool)
    c = (img.shape[0] // 2, img.shape[1] // 2)
    k = lab[c]
    if k == 0:
        idx = np.argwhere(lab > 0)
        d2 = np.sum((idx - c) ** 2, axis=1)
        j = int(np.argmin(d2))
        if np.sqrt(d2[j]) * h > capture_mm:
            return np.zeros(img.shape, bool)
        k = lab[tuple(idx[j])]
    return lab == k


def _min_diameter(region, h, directions):
    if not region.any():
        return 0.0
    # second-moment diameter along each direction through the centroid:
    # 4 sd of the projected samples is exact for a disc, and unlike chord
    # lengths it does not dip at the staircase notches of a voxelized edge
    pts = np.argwhere(region) * h
    pts = pts - pts.mean(axis=0)
    theta = np.arange(directions) * np.pi / directions
    proj = pts @ np.stack([np.cos(theta), np.sin(theta)])
    var = (proj**2).mean(axis=0) + h * h / 12.0
    return float(4.0 * np.sqrt(var.min()))


def slice_sections(lumen_mask, outer_mask, line, params: SectionParams | None = None) -> list:
    """Cross-sections of both masks every ``step_mm`` along ``line``.

    End sections are sampled one voxel inside the segment so that their
    planes do not coincide with a mask clipped at the seeds.  A section whose
    region touches the volume boundary is marked ``excluded``.
    """
    params = params or SectionParams()
    lumen = check_mask(lumen_mask)
    outer = check_mask(outer_mask)
    check_compatible(lumen, outer)
    if not isinstance(line, Centerline):
        line = Centerline(line)
    L = line.length
    h = min(lumen.spacing) / params.supersample
    inset = max(lumen.spacing)
    # cell-centred samples, so none sits on a half-voxel tie of a mask
    n_ax = 2 * int(np.ceil(params.half_width_mm / h))
    ax = (np.arange(n_ax) - 0.5 * (n_ax - 1)) * h
    lv = lumen.values.astype(float)
    ov = outer.values.astype(float)
    # a polyline through a curve is a little shorter than the curve, so an
    # end within a thousandth of a step still gets its section
    n = int(np.floor(L / params.step_mm + 1e-3)) + 1
    out = []
    for i in range(n):
        s = i * params.step_mm
        s_eval = min(max(s, inset), L - inset) if L > 2 * inset else 0.5 * L
        p = line.point_at(s_eval)
        t = line.tangent_at(s_eval, params.tangent_window_mm)
        u, v = (w[0] for w in _normal_frame(t[None, :]))
        limg, outside = _plane_samples(lumen, lv, p, u, v, ax)
        oimg, _ = _plane_samples(outer, ov, p, u, v, ax)
        lreg = _pick_region(limg, h, params.capture_mm)
        oreg = _pick_region(oimg, h, params.capture_mm)
        excluded = bool((lreg & outside).any() or (oreg & outside).any()
                        or outside[len(ax) // 2, len(ax) // 2])
        out.append(CrossSection(
            arclength=float(s),
            lumen_area=float(lreg.sum() * h * h),
            outer_area=float(oreg.sum() * h * h),
            min_diameter=_min_diameter(lreg, h, params.directions),
            normal=tuple(float(x) for x in t),
            excluded=excluded,
        ))
    return out


def _kept(sections):
    return [s for s in sections if not s.excluded]


def degree_of_stenosis(sections, distal_fraction: float = 0.2) -> tuple:
    """``(DS1, DS2)`` as fractions.

    ``A`` is the minimal lumen diameter, ``B`` the mean lumen diameter over
    the distal ``distal_fraction`` of sections and ``C`` the equivalent
    circle diameter of the outer wall at the section of ``A``.
    """
    secs = _kept(sections)
    if len(secs) < 5:
        raise MetricError(f"degree of stenosis needs at least 5 sections, got {len(secs)}")
    if not 0 < distal_fraction <= 1:
        raise GridError("distal fraction must lie in (0, 1]")
    diam = np.array([s.min_diameter for s in secs])
    k = int(np.argmin(diam))
    A = diam[k]
    n = max(1, int(round(distal_fraction * len(secs))))
    B = float(diam[-n:].mean())
    C = 2.0 * np.sqrt(secs[k].outer_area / np.pi)
    ds1 = (B - A) / B if B > 0 else 0.0
    ds2 = (C - A) / C if C > 0 else 0.0
    return float(np.clip(ds1, 0.0, 1.0)), float(np.clip(ds2, 0.0, 1.0))


def plaque_burden(section) -> float:
    """``(outer - lumen) / outer`` area fraction of one section."""
    outer = section.outer_area
    if not outer > 0:
        raise MetricError("plaque burden undefined for zero outer area")
    return float(np.clip((outer - section.lumen_area) / outer, 0.0, 1.0))


@dataclass
class VesselReport:
    sections: list
    ds1: float
    ds2: float
    pb_mean: float
    pb_sd: float
    mla: float
    mld: float
    dice: dict = field(default_factory=dict)
    hausdorff: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    @property
    def pb(self) -> str:
        return f"{self.pb_mean:.3f}±{self.pb_sd:.3f}"

    def to_dict(self) -> dict:
        d = {
            "schema": REPORT_SCHEMA,
            "ds1": self.ds1,
            "ds2": self.ds2,
            "ds1_percent": f"{100 * self.ds1:.1f}%",
            "ds2_percent": f"{100 * self.ds2:.1f}%",
            "plaque_burden": {"mean": self.pb_mean, "sd": self.pb_sd, "display": self.pb},
            "mla_mm2": self.mla,
            "mld_mm": self.mld,
            "sections": [
                {"arclength": s.arclength, "lumen_area": s.lumen_area,
                 "outer_area": s.outer_area, "min_diameter": s.min_diameter,
                 "excluded": s.excluded}
                for s in self.sections
            ],
        }
        if self.dice:
            d["dice"] = dict(self.dice)
            d["dice_convention"] = "both masks empty counts as 1.0"
        if self.hausdorff:
            d["hausdorff_mm"] = dict(self.hausdorff)
        if self.meta:
            d["meta"] = dict(self.meta)
        return d

    def to_json(self, path=None) -> str:
        text = json.dumps(self.to_dict(), indent=2, sort_keys=True)
        if path is not None:
            with open(path, "w") as fh:
                fh.write(text + "\n")
        return text

    def to_csv(self, path=None) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["arclength_mm", "lumen_area_mm2", "outer_area_mm2", "min_diameter_mm",
                    "plaque_burden", "excluded"])
        for s in self.sections:
            pb = plaque_burden(s) if s.outer_area > 0 else float("nan")
            w.writerow([f"{s.arclength:.3f}", f"{s.lumen_area:.6f}", f"{s.outer_area:.6f}",
                        f"{s.min_diameter:.6f}", f"{pb:.6f}", int(s.excluded)])
        w.writerow([])
        w.writerow(["DS1", "DS2", "PB (/0.5mm)", "MLA (mm2)", "MLD (mm)"])
        w.writerow([f"{self.ds1:.4f}", f"{self.ds2:.4f}", self.pb, f"{self.mla:.4f}",
                    f"{self.mld:.4f}"])
        text = buf.getvalue()
        if path is not None:
            with open(path, "w", newline="") as fh:
                fh.write(text)
        return text


def summarize_sections(sections, distal_fraction: float = 0.2, **extra) -> VesselReport:
    secs = _kept(sections)
    if not secs:
        raise MetricError("no usable cross-section")
    ds1, ds2 = degree_of_stenosis(sections, distal_fraction)
    pbs = np.array([plaque_burden(s) for s in secs if s.outer_area > 0])
    return VesselReport(
        sections=list(sections), ds1=ds1, ds2=ds2,
        pb_mean=float(pbs.mean()) if len(pbs) else 0.0,
        pb_sd=float(pbs.std()) if len(pbs) else 0.0,
        mla=float(min(s.lumen_area for s in secs)),
        mld=float(min(s.min_diameter for s in secs)),
        **extra,
    )


def build_report(result, reference: dict | None = None,
                 params: SectionParams | None = None,
                 distal_fraction: float = 0.2) -> VesselReport:
    """Section table, stenosis, burden and extrema for a segmentation result;
    Dice and Hausdorff per structure when ``reference`` masks are given."""
    sections = slice_sections(result.lumen_mask, result.outer_mask, result.centerline, params)
    d, hd = {}, {}
    for name, ref in (reference or {}).items():
        mine = getattr(result, f"{name}_mask")
        d[name] = dice(mine, ref)
        a, b = _as_mask(mine)[0], _as_mask(ref)[0]
        hd[name] = hausdorff(mine, ref) if a.any() and b.any() else None
    return summarize_sections(sections, distal_fraction, dice=d, hausdorff=hd)


__all__ = [
    "CrossSection", "MetricError", "REPORT_SCHEMA", "SectionParams", "VesselReport",
    "build_report", "degree_of_stenosis", "dice", "directed_hausdorff", "hausdorff",
    "plaque_burden", "slice_sections", "summarize_sections",
]
