"""Synthetic coronary phantoms with analytic ground truth.

A phantom is a tube swept along an analytic path (straight line, circular
arc or helix) parametrized by arclength ``s``.  The lumen radius may carry a
Gaussian stenosis; the outer wall keeps a constant radius, so the narrowed
region is filled with wall tissue and the true DS2 equals the stenosis depth.
Calcific blobs are spheres straddling the wall.

Voxel intensities are averages over an ``n x n x n`` sub-sample lattice on
boundary voxels (partial volume); interior voxels are labelled at their
centre.  Truth masks take voxels whose sub-sample fraction is at least one
half, restricted to the seed-to-seed segment ``0 <= s <= length``.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .centerline import Centerline, SeedPair
from .grid import BinaryMask, GridError, VoxelGrid

BACKGROUND, WALL, LUMEN, CALCIUM = 0, 1, 2, 3


@dataclass(frozen=True)
class Stenosis:
    location_mm: float
    depth: float
    width_mm: float = 2.5

    def __post_init__(self):
        if not 0 <= self.depth < 1:
            raise GridError("stenosis depth must lie in [0, 1)")
        if not self.width_mm > 0:
            raise GridError("stenosis width must be positive")


@dataclass(frozen=True)
class Blob:
    """Sphere centred ``offset_mm`` from the axis at ``arclength_mm``, in the
    direction ``angle`` (radians) around the path."""

    arclength_mm: float
    radius_mm: float = 0.8
    angle: float = 0.0
    offset_mm: float | None = None

    def __post_init__(self):
        if not self.radius_mm > 0:
            raise GridError("blob radius must be positive")


@dataclass(frozen=True)
class PhantomSpec:
    path: str = "straight"
    length_mm: float = 40.0
    radius_mm: float = 2.0
    wall_mm: float = 0.5
    stenosis: Stenosis | None = None
    lumen_hu: float = 350.0
    wall_hu: float = 50.0
    background_hu: float = -100.0
    calcium_hu: float = 800.0
    blobs: tuple = ()
    noise_sd: float = 0.0
    spacing: tuple = (0.4, 0.4, 0.5)
    seed: int = 0
    supersample: int = 8
    margin_mm: float = 5.0
    extension_mm: float = 4.0
    arc_radius_mm: float = 25.0
    helix_radius_mm: float = 10.0
    helix_pitch_mm: float = 20.0
    dims: tuple | None = None
    origin: tuple | None = None

    def __post_init__(self):
        if self.path not in PATHS:
            raise GridError(f"unknown path kind {self.path!r}; expected one of {sorted(PATHS)}")
        if not (self.length_mm > 0 and self.radius_mm > 0):
            raise GridError("length and radius must be positive")
        if self.wall_mm < 0 or self.noise_sd < 0:
            raise GridError("wall thickness and noise sd must be non-negative")
        if self.supersample < 1:
            raise GridError("supersample must be >= 1")
        if any(s <= 0 for s in self.spacing):
            raise GridError("spacing must be positive")
        if isinstance(self.stenosis, dict):
            object.__setattr__(self, "stenosis", Stenosis(**self.stenosis))
        object.__setattr__(self, "blobs", tuple(Blob(**b) if isinstance(b, dict) else b
                                                 for b in self.blobs))
        object.__setattr__(self, "spacing", tuple(float(s) for s in self.spacing))

    @property
    def outer_radius_mm(self) -> float:
        return self.radius_mm + self.wall_mm

    def lumen_radius(self, s) -> np.ndarray:
        s = np.asarray(s, dtype=float)
        r = np.full(s.shape, self.radius_mm)
        st = self.stenosis
        if st is not None and st.depth > 0:
            # minimum lumen radius is (1 - depth) times the outer radius
            r_min = (1.0 - st.depth) * self.outer_radius_mm
            drop = max(self.radius_mm - r_min, 0.0)
            r = r - drop * np.exp(-0.5 * ((s - st.location_mm) / st.width_mm) ** 2)
        return r

    def to_dict(self) -> dict:
        d = asdict(self)
        d["spacing"] = list(self.spacing)
        return d


# paths --------------------------------------------------------------------


class _Path:
    def position(self, s):
        raise NotImplementedError

    def tangent(self, s):
        raise NotImplementedError

    def normal(self, s):
        raise NotImplementedError

    def project(self, p, s_lo, s_hi):
        """Arclength of the closest path point (clamped) and the distance."""
        raise NotImplementedError

    def frame(self, s):
        t = self.tangent(s)
        n = self.normal(s)
        return t, n, np.cross(t, n)


class StraightPath(_Path):
    """Line along +z through the origin."""

    def position(self, s):
        s = np.asarray(s, dtype=float)
        return np.stack([np.zeros_like(s), np.zeros_like(s), s], axis=-1)

    def tangent(self, s):
        s = np.asarray(s, dtype=float)
        return np.broadcast_to(np.array([0.0, 0.0, 1.0]), s.shape + (3,)).copy()

    def normal(self, s):
        return np.array([1.0, 0.0, 0.0])

    def project(self, p, s_lo, s_hi):
        s = np.clip(p[:, 2], s_lo, s_hi)
        return s, np.linalg.norm(p - self.position(s), axis=1)


class ArcPath(_Path):
    """Circle of radius ``R`` in the x-z plane, starting at the origin heading +z."""

    def __init__(self, radius):
        self.R = float(radius)

    def position(self, s):
        th = np.asarray(s, dtype=float) / self.R
        return np.stack([self.R * (1 - np.cos(th)), np.zeros_like(th), self.R * np.sin(th)],
                        axis=-1)

    def tangent(self, s):
        th = np.asarray(s, dtype=float) / self.R
        return np.stack([np.sin(th), np.zeros_like(th), np.cos(th)], axis=-1)

    def normal(self, s):
        th = float(s) / self.R
        return np.array([np.cos(th), 0.0, -np.sin(th)])

    def project(self, p, s_lo, s_hi):
        # angle about the circle centre (R, 0, 0); points are within a few mm
        # of the arc so the principal branch is unambiguous
        th = np.arctan2(p[:, 2], self.R - p[:, 0])
        s = np.clip(th * self.R, s_lo, s_hi)
        return s, np.linalg.norm(p - self.position(s), axis=1)


class HelixPath(_Path):
    """Helix about the z axis, starting at (R, 0, 0)."""

    def __init__(self, radius, pitch):
        self.R = float(radius)
        self.c = float(pitch) / (2 * np.pi)
        self.k = np.hypot(self.R, self.c)

    def position(self, s):
        th = np.asarray(s, dtype=float) / self.k
        return np.stack([self.R * np.cos(th), self.R * np.sin(th), self.c * th], axis=-1)

    def tangent(self, s):
        th = np.asarray(s, dtype=float) / self.k
        return np.stack([-self.R * np.sin(th), self.R * np.cos(th),
                         np.full_like(th, self.c)], axis=-1) / self.k

    def normal(self, s):
        th = float(s) / self.k
        return np.array([-np.cos(th), -np.sin(th), 0.0])

    def project(self, p, s_lo, s_hi):
        x, y, z = p[:, 0], p[:, 1], p[:, 2]
        # start from the planar angle on the turn nearest the height guess
        th = np.arctan2(y, x)
        guess = z / self.c
        th = th + 2 * np.pi * np.round((guess - th) / (2 * np.pi))
        for _ in range(30):
            # derivative of half the squared distance and its second derivative
            g = self.R * (x * np.sin(th) - y * np.cos(th)) + self.c * (self.c * th - z)
            h = self.R * (x * np.cos(th) + y * np.sin(th)) + self.c**2
            step = np.where(h > 0, g / np.where(h > 0, h, 1.0), 0.1 * np.sign(g))
            th = th - step
            if np.max(np.abs(step)) < 1e-13:
                break
        s = np.clip(th * self.k, s_lo, s_hi)
        return s, np.linalg.norm(p - self.position(s), axis=1)


PATHS = {"straight": None, "arc": None, "helix": None}


def make_path(spec: PhantomSpec) -> _Path:
    if spec.path == "straight":
        return StraightPath()
    if spec.path == "arc":
        return ArcPath(spec.arc_radius_mm)
    return HelixPath(spec.helix_radius_mm, spec.helix_pitch_mm)


# ground truth -------------------------------------------------------------


@dataclass
class GroundTruth:
    lumen: BinaryMask
    outer: BinaryMask
    plaque: BinaryMask
    centerline: Centerline
    seeds: SeedPair
    ds2: float
    mla: float
    mld: float
    sections: np.ndarray = field(repr=False)
    blob_masks: list = field(default_factory=list, repr=False)


def _blob_centres(spec: PhantomSpec, path: _Path) -> np.ndarray:
    out = []
    for b in spec.blobs:
        _, n, bn = path.frame(b.arclength_mm)
        off = b.offset_mm if b.offset_mm is not None else spec.radius_mm + 0.5 * spec.wall_mm
        out.append(path.position(b.arclength_mm) + off * (np.cos(b.angle) * n
                                                            + np.sin(b.angle) * bn))
    return np.asarray(out).reshape(-1, 3)


def _label_points(spec: PhantomSpec, path: _Path, centres, p):
    """Tissue label and arclength of world points ``p`` (N, 3)."""
    lo, hi = -spec.extension_mm, spec.length_mm + spec.extension_mm
    s, _ = path.project(p, lo, hi)
    # distance to the clamped foot; beyond the caps the tube is absent
    foot = path.position(s)
    rel = p - foot
    tang = path.tangent(s)
    along = np.einsum("ij,ij->i", rel, tang)
    inside_caps = ((s > lo) & (s < hi)) | (np.abs(along) < 1e-12)
    rho = np.linalg.norm(rel - along[:, None] * tang, axis=1)
    label = np.full(len(p), BACKGROUND, dtype=np.int8)
    label[inside_caps & (rho <= spec.outer_radius_mm)] = WALL
    label[inside_caps & (rho <= spec.lumen_radius(s))] = LUMEN
    for c, b in zip(centres, spec.blobs):
        label[np.linalg.norm(p - c, axis=1) <= b.radius_mm] = CALCIUM
    return label, s


def _interface_clearance(spec: PhantomSpec, path: _Path, centres, p):
    """Lower bound on the distance from ``p`` to any tissue interface."""
    lo, hi = -spec.extension_mm, spec.length_mm + spec.extension_mm
    s, dist = path.project(p, lo, hi)
    s_free, _ = path.project(p, lo - 10 * spec.outer_radius_mm, hi + 10 * spec.outer_radius_mm)
    clear = np.minimum(np.abs(dist - spec.outer_radius_mm),
                       np.abs(dist - spec.lumen_radius(s)))
    # cap planes
    clear = np.minimum(clear, np.minimum(np.abs(s_free - lo), np.abs(s_free - hi)))
    for c, b in zip(centres, spec.blobs):
        clear = np.minimum(clear, np.abs(np.linalg.norm(p - c, axis=1) - b.radius_mm))
    return clear


def _auto_lattice(spec: PhantomSpec, path: _Path):
    s = np.linspace(-spec.extension_mm, spec.length_mm + spec.extension_mm, 2001)
    pts = path.position(s)
    pad = spec.outer_radius_mm + spec.margin_mm
    lo = pts.min(axis=0) - pad
    hi = pts.max(axis=0) + pad
    sp = np.asarray(spec.spacing)
    dims = tuple(int(np.ceil((hi[d] - lo[d]) / sp[d])) + 1 for d in range(3))
    return dims, tuple(float(v) for v in lo)


def generate(spec: PhantomSpec):
    """Voxelize ``spec``; returns ``(volume, truth)``."""
    path = make_path(spec)
    if spec.dims is None:
        dims, origin = _auto_lattice(spec, path)
    else:
        dims = tuple(int(d) for d in spec.dims)
        origin = tuple(float(v) for v in (spec.origin or (0.0, 0.0, 0.0)))
    sp = np.asarray(spec.spacing)
    centres = _blob_centres(spec, path)

    # the seed-to-seed segment and its tube must fit inside the lattice
    s_chk = np.linspace(0.0, spec.length_mm, 401)
    pts = path.position(s_chk)
    lo = np.asarray(origin)
    hi = lo + (np.asarray(dims) - 1) * sp
    if np.any(pts.min(axis=0) - spec.outer_radius_mm < lo) or \
            np.any(pts.max(axis=0) + spec.outer_radius_mm > hi):
        raise GridError("phantom geometry exceeds the grid")

    idx = np.indices(dims).reshape(3, -1).T
    centers = lo + idx * sp
    n = int(spec.supersample)
    half_diag = 0.5 * float(np.linalg.norm(sp))
    clear = _interface_clearance(spec, path, centres, centers)
    mixed = clear <= 1.5 * half_diag

    levels = np.array([spec.background_hu, spec.wall_hu, spec.lumen_hu, spec.calcium_hu])
    frac = np.zeros((len(centers), 4))
    lab_c, s_c = _label_points(spec, path, centres, centers)
    frac[np.arange(len(centers)), lab_c] = 1.0

    sel = np.flatnonzero(mixed)
    if n > 1 and len(sel):
        sub = (np.arange(n) + 0.5) / n - 0.5
        offs = np.stack(np.meshgrid(sub, sub, sub, indexing="ij"), axis=-1).reshape(-1, 3) * sp
        chunk = max(1, 200000 // len(offs))
        for start in range(0, len(sel), chunk):
            ids = sel[start:start + chunk]
            p = (centers[ids][:, None, :] + offs[None]).reshape(-1, 3)
            lab, _ = _label_points(spec, path, centres, p)
            counts = np.zeros((len(ids), 4))
            np.add.at(counts, (np.repeat(np.arange(len(ids)), len(offs)), lab), 1.0)
            frac[ids] = counts / len(offs)

    values = (frac @ levels).reshape(dims, order="C")
    if spec.noise_sd > 0:
        rng = np.random.Generator(np.random.Philox(key=int(spec.seed)))
        values = values + rng.normal(0.0, spec.noise_sd, size=dims)
    volume = VoxelGrid(dims, tuple(sp), origin, values, "intensity")

    in_segment = ((s_c >= 0.0) & (s_c <= spec.length_mm)).reshape(dims)
    frac = frac.reshape(dims + (4,))
    lumen = (frac[..., LUMEN] >= 0.5) & in_segment
    outer = (frac[..., WALL:].sum(axis=-1) >= 0.5) & in_segment
    plaque = (frac[..., CALCIUM] > 0.5) & in_segment & ~lumen
    # per-blob truth, for recall by blob
    blob_masks = []
    if len(centres):
        cpts = centers.reshape(dims + (3,))
        for c, b in zip(centres, spec.blobs):
            near = np.linalg.norm(cpts - c, axis=-1) <= b.radius_mm + half_diag
            blob_masks.append(BinaryMask.like(volume, plaque & near))

    line_s = np.linspace(0.0, spec.length_mm, max(int(np.ceil(spec.length_mm / 0.1)), 1) + 1)
    line = Centerline(path.position(line_s))
    seeds = SeedPair(tuple(line.points[0]), tuple(line.points[-1]))

    sec_s = np.arange(0.0, spec.length_mm + 1e-9, 0.5)
    r = spec.lumen_radius(sec_s)
    sections = np.zeros(len(sec_s), dtype=[("arclength", float), ("lumen_area", float),
                                           ("outer_area", float), ("min_diameter", float)])
    sections["arclength"] = sec_s
    sections["lumen_area"] = np.pi * r**2
    sections["outer_area"] = np.pi * spec.outer_radius_mm**2
    sections["min_diameter"] = 2 * r
    r_min = float(spec.lumen_radius(np.linspace(0, spec.length_mm, 4001)).min())
    st = spec.stenosis
    if st is not None and 0 <= st.location_mm <= spec.length_mm:
        r_min = min(r_min, float(spec.lumen_radius(st.location_mm)))
    # original width is the outer diameter, so a healthy walled tube has DS2 > 0
    ds2 = 1.0 - r_min / spec.outer_radius_mm

    truth = GroundTruth(
        lumen=BinaryMask.like(volume, lumen),
        outer=BinaryMask.like(volume, outer),
        plaque=BinaryMask.like(volume, plaque),
        centerline=line,
        seeds=seeds,
        ds2=float(ds2),
        mla=float(np.pi * r_min**2),
        mld=float(2 * r_min),
        sections=sections,
        blob_masks=blob_masks,
    )
    return volume, truth


def default_recipes() -> dict:
    """Named phantom specifications used by the acceptance suite and the CLI."""
    base = PhantomSpec()
    return {
        "clean-straight": base,
        "stenosed-50": replace(base, stenosis=Stenosis(20.0, 0.5, 2.5)),
        "arc": replace(base, path="arc"),
        "helical": replace(base, path="helix"),
        "calcified-two-blob": replace(
            base, calcium_hu=950.0, wall_mm=1.0,
            blobs=(Blob(13.0, 0.8, 0.0), Blob(27.0, 0.8, np.pi)),
        ),
        "noisy-sd30": replace(base, noise_sd=30.0, seed=7),
        "plaque-free": replace(base, wall_mm=1.0),
    }


def recipe(name: str) -> PhantomSpec:
    recipes = default_recipes()
    if name not in recipes:
        raise KeyError(f"unknown phantom recipe {name!r}; known: {', '.join(recipes)}")
    return recipes[name]


__all__ = ["Blob", "GroundTruth", "PhantomSpec", "Stenosis", "default_recipes", "generate",
           "make_path", "recipe"]
