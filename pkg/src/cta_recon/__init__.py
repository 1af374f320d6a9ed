"""Coronary CTA vessel reconstruction: centerline extraction, lumen, outer
wall and calcified plaque level sets, surface meshes and quantitative
stenosis metrics, with synthetic phantoms for validation."""

__version__ = "0.1.0"

from .centerline import Centerline, SeedPair, extract_centerline  # noqa: E402
from .config import PipelineConfig  # noqa: E402
from .grid import BinaryMask, VoxelGrid  # noqa: E402
from .io import load_mask, load_volume, save_volume  # noqa: E402
from .mesh import TriangleMesh, export_mesh, marching_cubes  # noqa: E402
from .metrics import VesselReport, build_report, dice, hausdorff  # noqa: E402
from .phantom import PhantomSpec, generate, recipe  # noqa: E402
from .pipeline import CoronarySegmenter, SegmentationResult, run_pipeline  # noqa: E402
from .vesselness import FrangiVesselness, frangi_vesselness  # noqa: E402

__all__ = [
    "BinaryMask", "Centerline", "CoronarySegmenter", "FrangiVesselness", "PhantomSpec",
    "PipelineConfig", "SeedPair", "SegmentationResult", "TriangleMesh", "VesselReport",
    "VoxelGrid", "build_report", "dice", "export_mesh", "extract_centerline",
    "frangi_vesselness", "generate", "hausdorff", "load_mask", "load_volume",
    "marching_cubes", "recipe", "run_pipeline", "save_volume",
]
