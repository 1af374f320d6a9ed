"""Pipeline configuration: nested dataclasses, dict conversion and TOML I/O.

Every default here is the value the method prescribes; call sites never
hard-code them.  Unknown keys are rejected so typos fail loudly.
"""
from __future__ import annotations

import dataclasses
import sys
from dataclasses import dataclass, field

import tomli_w

from .centerline import CenterlineConfig
from .grid import GridError
from .levelset import LevelSetParams
from .membership import ThresholdConfig
from .vesselness import FrangiParams

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib

SCHEMA_VERSION = 1


@dataclass
class StageParams:
    """Level-set settings for one pass of one stage."""

    curvature: float = 0.1
    iterations: int = 200
    data_weight: float = 1.0
    shape_weight: float = 0.2
    label_weight: float = 0.0
    time_step: float = 0.45
    heaviside_eps: float = 1.0

    def __post_init__(self):
        if not self.curvature > 0:
            raise GridError("stage curvature factor must be positive")
        self.as_levelset()

    def as_levelset(self, **kw) -> LevelSetParams:
        return LevelSetParams(**dataclasses.asdict(self), **kw)


@dataclass
class StageConfig:
    lumen_pass1: StageParams = field(default_factory=lambda: StageParams(curvature=0.1))
    lumen_pass2: StageParams = field(default_factory=lambda: StageParams(curvature=0.6))
    outer_pass1: StageParams = field(default_factory=lambda: StageParams(curvature=0.1))
    outer_pass2: StageParams = field(default_factory=lambda: StageParams(curvature=0.6))
    plaque: StageParams = field(default_factory=lambda: StageParams(curvature=0.5))


@dataclass
class RegionConfig:
    # shape prior: tube of this radius around the centerline
    prior_tube_radius_mm: float = 1.5
    # lumen pass 2 and outer pass 2 search band around the pass-1 result
    pass2_band_voxels: float = 2.0
    # outer-wall ROI: lumen dilated by this distance
    outer_roi_dilation_mm: float = 2.0
    # outer-wall data image: HU clipped from above at this value
    outer_intensity_cap: float = 100.0
    # ROIs are clipped to the seed-to-seed segment (plus this margin)
    clip_to_segment: bool = True
    end_margin_mm: float = 0.0

    def __post_init__(self):
        if not self.prior_tube_radius_mm > 0:
            raise GridError("prior tube radius must be positive")
        if self.pass2_band_voxels < 0 or self.outer_roi_dilation_mm < 0:
            raise GridError("band and dilation sizes must be non-negative")


@dataclass
class PipelineConfig:
    thresholds: ThresholdConfig = field(default_factory=ThresholdConfig)
    frangi: FrangiParams = field(default_factory=FrangiParams)
    centerline: CenterlineConfig = field(default_factory=CenterlineConfig)
    stages: StageConfig = field(default_factory=StageConfig)
    regions: RegionConfig = field(default_factory=RegionConfig)


def to_dict(obj) -> dict:
    d = dataclasses.asdict(obj)
    if isinstance(obj, PipelineConfig):
        return {"schema": SCHEMA_VERSION, **d}
    return d


def _build(default, data: dict, path: str):
    """Copy of ``default`` with the keys of ``data`` replaced, recursively;
    nested tables start from the field's own default, so a partial stage
    table keeps that stage's settings."""
    if not isinstance(data, dict):
        raise GridError(f"config section {path or '<root>'} must be a table")
    names = {f.name for f in dataclasses.fields(default)}
    unknown = set(data) - names
    if unknown:
        raise GridError(f"unknown config key(s) in {path or '<root>'}: {sorted(unknown)}")
    kwargs = {}
    for name, value in data.items():
        current = getattr(default, name)
        if dataclasses.is_dataclass(current):
            kwargs[name] = _build(current, value, f"{path}.{name}" if path else name)
        else:
            kwargs[name] = value
    return dataclasses.replace(default, **kwargs)


def from_dict(data: dict) -> PipelineConfig:
    """Build a config; omitted keys keep their defaults."""
    data = dict(data)
    schema = data.pop("schema", SCHEMA_VERSION)
    if schema != SCHEMA_VERSION:
        raise GridError(f"unsupported config schema {schema!r} (expected {SCHEMA_VERSION})")
    return _build(PipelineConfig(), data, "")


def loads(text: str) -> PipelineConfig:
    return from_dict(tomllib.loads(text))


def load(path) -> PipelineConfig:
    with open(path, "rb") as fh:
        return from_dict(tomllib.load(fh))


def dumps(cfg: PipelineConfig) -> str:
    return tomli_w.dumps(to_dict(cfg))


def dump(cfg: PipelineConfig, path) -> None:
    with open(path, "w") as fh:
        fh.write(dumps(cfg))


__all__ = ["PipelineConfig", "RegionConfig", "SCHEMA_VERSION", "StageConfig", "StageParams",
           "dump", "dumps", "from_dict", "load", "loads", "to_dict"]
