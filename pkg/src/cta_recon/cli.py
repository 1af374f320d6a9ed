"""Command-line front end.

Every invocation writes a JSON run manifest (``<out>/manifest.json`` or
``--manifest``), also on failure.  Exit codes: 0 success, 1 input or usage
error, 2 numerical failure.  Set ``CTA_RECON_LOG`` to DEBUG, INFO, WARNING
or ERROR for log verbosity (default WARNING).
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace
from pathlib import Path
from types import SimpleNamespace

import numpy as np

from . import __version__
from . import config as config_mod
from .centerline import Centerline, SeedPair, TrappedBacktraceError, extract_centerline
from .config import PipelineConfig
from .grid import BinaryMask, BoundsError, GridError, VoxelGrid
from .io import VolumeIOError, ensure_dir, load_mask, load_volume, parse_point, save_volume
from .levelset import LevelSetError
from .membership import EmptySelectionError, gated_memberships
from .mesh import MeshIOError, export_mesh, laplacian_smooth, marching_cubes
from .metrics import MetricError, SectionParams, build_report, dice, hausdorff
from .phantom import PhantomSpec, generate, recipe
from .pipeline import StageError, run_pipeline
from .vesselness import frangi_vesselness

log = logging.getLogger("cta_recon")

EXIT_OK, EXIT_INPUT, EXIT_NUMERIC = 0, 1, 2
LOG_ENV = "CTA_RECON_LOG"
STRUCTURES = ("lumen", "outer", "plaque")
MESH_EXT = {"stl": "stl_binary", "obj": "obj", "ply": "ply_ascii"}


class UsageError(Exception):
    def __init__(self, message, usage):
        super().__init__(message)
        self.usage = usage


class _Parser(argparse.ArgumentParser):
    # argparse exits with status 2 on bad flags; usage errors here are input errors
    def error(self, message):
        raise UsageError(message, self.format_usage())


class InputError(Exception):
    pass


# manifest -----------------------------------------------------------------


def sha256_path(path) -> str:
    p = Path(path)
    h = hashlib.sha256()
    files = sorted(f for f in p.rglob("*") if f.is_file()) if p.is_dir() else [p]
    for f in files:
        if p.is_dir():
            h.update(str(f.relative_to(p)).encode())
        with open(f, "rb") as fh:
            for chunk in iter(lambda: fh.read(1 << 20), b""):
                h.update(chunk)
    return h.hexdigest()


class RunManifest:
    """Config snapshot, input hashes, version, stage timings and outputs."""

    def __init__(self, command, argv):
        self.data = {
            "tool": "cta_recon",
            "version": __version__,
            "command": command,
            "argv": list(argv),
            "status": "running",
            "exit_code": None,
            "error": None,
            "config": None,
            "inputs": {},
            "timings_ms": {},
            "outputs": [],
        }

    def add_input(self, path):
        try:
            self.data["inputs"][str(path)] = sha256_path(path)
        except OSError:
            self.data["inputs"][str(path)] = None

    def add_output(self, path):
        path = str(path)
        if path not in self.data["outputs"]:
            self.data["outputs"].append(path)

    def finish(self, code, error=None):
        self.data["exit_code"] = code
        self.data["status"] = {EXIT_OK: "ok", EXIT_INPUT: "input_error",
                               EXIT_NUMERIC: "numerical_failure"}[code]
        self.data["error"] = None if error is None else str(error)
        if code != EXIT_OK:
            # only outputs that made it to disk are listed
            self.data["outputs"] = [p for p in self.data["outputs"] if Path(p).exists()]

    def write(self, path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.data, indent=2, sort_keys=True, default=str) + "\n")
        return path


# argument parsing ---------------------------------------------------------


def _add_common(p, config=True):
    p.add_argument("--out", required=True, help="output directory")
    if config:
        p.add_argument("--config", help="TOML configuration (omitted keys keep the defaults)")
    p.add_argument("--manifest", help="manifest path (default <out>/manifest.json)")


def _add_seeds(p):
    g = p.add_mutually_exclusive_group(required=True)
    g.add_argument("--start", help="start seed x,y,z in mm")
    g.add_argument("--start-voxel", help="start seed i,j,k voxel index")
    g = p.add_mutually_exclusive_group(required=True)
    g.add_argument("--end", help="end seed x,y,z in mm")
    g.add_argument("--end-voxel", help="end seed i,j,k voxel index")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="cta-recon", description="Coronary CTA lumen, wall and plaque "
                     "segmentation with quantitative reporting.")
    parser.add_argument("--version", action="version", version=f"cta-recon {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("segment", help="full pipeline: masks, phi, centerline, meshes, report")
    p.add_argument("--input", required=True, nargs="+", help="volume(s): NRRD, raw .json, DICOM dir")
    _add_seeds(p)
    _add_common(p)
    p.add_argument("--jobs", type=int, default=1, help="threads over independent volumes")
    p.add_argument("--mesh-format", choices=sorted(MESH_EXT), default="stl")
    p.add_argument("--no-mesh", action="store_true", help="skip surface extraction")
    p.add_argument("--smooth", type=int, default=0, help="Laplacian smoothing passes on meshes")

    p = sub.add_parser("centerline", help="minimum-cost centerline between two seeds")
    p.add_argument("--input", required=True)
    _add_seeds(p)
    _add_common(p)
    p.add_argument("--arrival", action="store_true", help="also write the arrival-time grid")

    p = sub.add_parser("memberships", help="dump fuzzy membership grids")
    p.add_argument("--input", required=True)
    _add_seeds(p)
    _add_common(p)

    p = sub.add_parser("vesselness", help="dump the multiscale vesselness grid")
    p.add_argument("--input", required=True)
    _add_common(p)

    p = sub.add_parser("mesh", help="convert a phi or mask volume to a surface mesh")
    p.add_argument("--input", required=True)
    _add_common(p, config=False)
    p.add_argument("--format", choices=sorted(MESH_EXT), default="stl")
    p.add_argument("--iso", type=float, default=None,
                   help="iso value (default 0 for phi, 0.5 for masks)")
    p.add_argument("--smooth", type=int, default=0)
    p.add_argument("--label", default="surface")

    p = sub.add_parser("metrics", help="Dice and Hausdorff between two mask sets")
    p.add_argument("--pred", required=True, help="mask file or directory of <structure>.nrrd")
    p.add_argument("--ref", required=True, help="mask file or directory of <structure>.nrrd")
    _add_common(p, config=False)

    p = sub.add_parser("compare", help="full vessel report from a segment output directory")
    p.add_argument("--seg", required=True, help="directory written by 'segment'")
    p.add_argument("--ref", help="directory of reference masks (e.g. 'phantom' output)")
    _add_common(p, config=False)
    p.add_argument("--distal-fraction", type=float, default=0.2)

    p = sub.add_parser("phantom", help="synthetic vessel phantom with ground truth")
    p.add_argument("recipe", nargs="?", help="named recipe (see --list)")
    p.add_argument("--spec", help="TOML phantom specification instead of a recipe")
    p.add_argument("--list", action="store_true", help="list recipe names and exit")
    p.add_argument("--out", help="output directory")
    p.add_argument("--manifest")
    p.add_argument("--format", choices=("nrrd", "raw"), default="nrrd")
    return parser


# helpers ------------------------------------------------------------------


def _load_config(args, manifest) -> PipelineConfig:
    if getattr(args, "config", None):
        manifest.add_input(args.config)
        try:
            cfg = config_mod.load(args.config)
        except OSError as exc:
            raise InputError(f"{args.config}: cannot read config ({exc.strerror or exc})") from exc
        except (GridError, TypeError, ValueError) as exc:
            raise InputError(f"{args.config}: {exc}") from exc
    else:
        cfg = PipelineConfig()
    manifest.data["config"] = config_mod.to_dict(cfg)
    return cfg


def resolve_seeds(args, grid) -> SeedPair:
    """World-mm or voxel-index seeds; voxel seeds are converted to mm."""
    def one(mm, vox, name):
        if mm is not None:
            return np.asarray(parse_point(mm), dtype=float)
        idx = np.asarray(parse_point(vox), dtype=float)
        if not np.allclose(idx, np.round(idx)):
            raise GridError(f"--{name}-voxel expects integer indices, got {vox!r}")
        return grid.voxel_to_world(np.round(idx).astype(int))

    seeds = SeedPair(one(args.start, args.start_voxel, "start"),
                     one(args.end, args.end_voxel, "end"))
    seeds.check(grid)
    return seeds


def _save(obj, path, manifest):
    manifest.add_output(save_volume(obj, path))


def _mesh_from_grid(grid: VoxelGrid, iso: float, label: str, smooth: int):
    m = marching_cubes(grid, iso, label)
    return laplacian_smooth(m, iterations=smooth) if smooth > 0 else m


def _write_mesh(mesh, path, manifest):
    export_mesh(mesh, path, MESH_EXT[Path(path).suffix[1:]])
    manifest.add_output(path)


def _write_json(obj, path, manifest):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")
    manifest.add_output(path)


# subcommands --------------------------------------------------------------


def _segment_one(path, args, cfg, out: Path, manifest):
    vol = load_volume(path)
    seeds = resolve_seeds(args, vol)
    result = run_pipeline(vol, seeds, cfg)
    ensure_dir(out)
    for name in STRUCTURES:
        _save(getattr(result, f"{name}_mask"), out / f"{name}.nrrd", manifest)
        _save(getattr(result, f"phi_{name}"), out / f"phi_{name}.nrrd", manifest)
    result.centerline.to_csv(out / "centerline.csv")
    manifest.add_output(out / "centerline.csv")
    if not args.no_mesh:
        for name in STRUCTURES:
            phi = getattr(result, f"phi_{name}")
            if not (phi.values > 0).any():
                log.info("%s: empty %s, no mesh written", path, name)
                continue
            mesh = _mesh_from_grid(phi, 0.0, name, args.smooth)
            _write_mesh(mesh, out / f"{name}.{args.mesh_format}", manifest)
    try:
        report = build_report(result)
    except (MetricError, GridError) as exc:
        raise StageError("report", exc) from exc
    report.to_json(out / "report.json")
    report.to_csv(out / "sections.csv")
    manifest.add_output(out / "report.json")
    manifest.add_output(out / "sections.csv")
    prov = dict(result.provenance, input=str(path), version=__version__)
    _write_json(prov, out / "provenance.json", manifest)
    return result.provenance["timings_ms"]


def cmd_segment(args, manifest):
    cfg = _load_config(args, manifest)
    if args.jobs < 1:
        raise InputError("--jobs must be >= 1")
    inputs = list(args.input)
    for p in inputs:
        manifest.add_input(p)
    out = ensure_dir(args.out)
    if len(inputs) == 1:
        manifest.data["timings_ms"] = _segment_one(inputs[0], args, cfg, out, manifest)
        return
    stems = [Path(p).stem or f"volume{i}" for i, p in enumerate(inputs)]
    if len(set(stems)) != len(stems):
        stems = [f"{i:02d}_{s}" for i, s in enumerate(stems)]
    with ThreadPoolExecutor(max_workers=args.jobs) as pool:
        futures = [pool.submit(_segment_one, p, args, cfg, out / s, manifest)
                   for p, s in zip(inputs, stems)]
        # results are collected in input order so the first failure is reported deterministically
        manifest.data["timings_ms"] = {s: f.result() for s, f in zip(stems, futures)}


def cmd_centerline(args, manifest):
    cfg = _load_config(args, manifest)
    manifest.add_input(args.input)
    vol = load_volume(args.input)
    seeds = resolve_seeds(args, vol)
    t0 = time.perf_counter()
    w = frangi_vesselness(vol, cfg.frangi)
    t1 = time.perf_counter()
    res = extract_centerline(vol, w, seeds, cfg.thresholds, cfg.centerline, return_details=True)
    t2 = time.perf_counter()
    manifest.data["timings_ms"] = {"vesselness": round(1000 * (t1 - t0), 3),
                                   "centerline": round(1000 * (t2 - t1), 3)}
    out = ensure_dir(args.out)
    res.centerline.to_csv(out / "centerline.csv")
    manifest.add_output(out / "centerline.csv")
    if args.arrival:
        T = res.arrival.times.values
        finite = np.where(np.isfinite(T), T, -1.0)
        # unreached voxels are stored as -1
        _save(vol.with_values(finite, kind="intensity"), out / "arrival.nrrd", manifest)


def cmd_memberships(args, manifest):
    cfg = _load_config(args, manifest)
    manifest.add_input(args.input)
    vol = load_volume(args.input)
    seeds = resolve_seeds(args, vol)
    w = frangi_vesselness(vol, cfg.frangi)
    line = extract_centerline(vol, w, seeds, cfg.thresholds, cfg.centerline)
    tf = gated_memberships(vol, line, cfg.thresholds)
    out = ensure_dir(args.out)
    for name in ("f_lumen", "f_outer", "f_plaque", "f1", "f2_outer", "f2_plaque", "d1"):
        _save(getattr(tf, name), out / f"{name}.nrrd", manifest)
    _write_json({"mean_lumen_intensity": tf.mean_intensity}, out / "memberships.json", manifest)


def cmd_vesselness(args, manifest):
    cfg = _load_config(args, manifest)
    manifest.add_input(args.input)
    vol = load_volume(args.input)
    t0 = time.perf_counter()
    w = frangi_vesselness(vol, cfg.frangi)
    manifest.data["timings_ms"] = {"vesselness": round(1000 * (time.perf_counter() - t0), 3)}
    _save(w, ensure_dir(args.out) / "vesselness.nrrd", manifest)


def cmd_mesh(args, manifest):
    manifest.add_input(args.input)
    g = load_volume(args.input)
    vals = g.values
    is_mask = bool(np.all((vals == 0) | (vals == 1)))
    iso = args.iso if args.iso is not None else (0.5 if is_mask else 0.0)
    if not (vals.min() < iso <= vals.max()):
        raise InputError(f"{args.input}: no isosurface at {iso}")
    mesh = _mesh_from_grid(g.with_values(vals.astype(float), kind="phi"), iso, args.label,
                           args.smooth)
    out = ensure_dir(args.out)
    _write_mesh(mesh, out / f"{Path(args.input).stem}.{args.format}", manifest)
    manifest.data["mesh"] = {"vertices": mesh.n_vertices, "triangles": mesh.n_triangles,
                             "area_mm2": mesh.area(), "watertight": mesh.is_watertight()}


def _mask_set(path) -> dict:
    p = Path(path)
    if p.is_dir():
        found = {n: load_mask(p / f"{n}.nrrd") for n in STRUCTURES if (p / f"{n}.nrrd").exists()}
        if not found:
            raise InputError(f"{p}: no lumen/outer/plaque .nrrd masks found")
        return found
    return {"mask": load_mask(p)}


def cmd_metrics(args, manifest):
    manifest.add_input(args.pred)
    manifest.add_input(args.ref)
    pred, ref = _mask_set(args.pred), _mask_set(args.ref)
    if set(pred) == {"mask"} and set(ref) != {"mask"} or set(ref) == {"mask"} and set(pred) != {"mask"}:
        raise InputError("--pred and --ref must both be files or both be directories")
    common = [n for n in (*STRUCTURES, "mask") if n in pred and n in ref]
    if not common:
        raise InputError("no structure present in both mask sets")
    res = {}
    for n in common:
        a, b = pred[n], ref[n]
        hd = hausdorff(a, b) if a.values.any() and b.values.any() else None
        res[n] = {"dice": dice(a, b), "hausdorff_mm": hd}
    out = ensure_dir(args.out)
    _write_json({"schema": 1, "dice_convention": "both masks empty counts as 1.0",
                 "structures": res}, out / "metrics.json", manifest)


def cmd_compare(args, manifest):
    seg = Path(args.seg)
    manifest.add_input(seg)
    masks = _mask_set(seg)
    missing = [n for n in ("lumen", "outer") if n not in masks]
    if missing or not (seg / "centerline.csv").exists():
        raise InputError(f"{seg}: expected lumen.nrrd, outer.nrrd and centerline.csv")
    masks.setdefault("plaque", BinaryMask.like(masks["lumen"], np.zeros(masks["lumen"].dims, bool)))
    result = SimpleNamespace(centerline=Centerline.from_csv(seg / "centerline.csv"),
                             **{f"{n}_mask": m for n, m in masks.items()})
    reference = None
    if args.ref:
        manifest.add_input(args.ref)
        ref = _mask_set(args.ref)
        reference = {n: ref[n] for n in STRUCTURES if n in ref and n in masks}
    report = build_report(result, reference, SectionParams(), args.distal_fraction)
    out = ensure_dir(args.out)
    report.to_json(out / "report.json")
    report.to_csv(out / "sections.csv")
    manifest.add_output(out / "report.json")
    manifest.add_output(out / "sections.csv")


def cmd_phantom(args, manifest):
    if args.list:
        for name in sorted(_recipes()):
            print(name)
        return
    if bool(args.recipe) == bool(args.spec):
        raise InputError("give exactly one of a recipe name or --spec")
    if not args.out:
        raise InputError("--out is required")
    if args.spec:
        manifest.add_input(args.spec)
        spec = _phantom_spec_from_toml(args.spec)
    else:
        try:
            spec = recipe(args.recipe)
        except KeyError as exc:
            raise InputError(exc.args[0]) from exc
    manifest.data["config"] = {"phantom": spec.to_dict()}
    volume, truth = generate(spec)
    out = ensure_dir(args.out)
    ext = ".nrrd" if args.format == "nrrd" else ".json"
    vol_path = save_volume(volume, out / f"volume{ext}")
    manifest.add_output(vol_path)
    if args.format == "raw":
        manifest.add_output(out / "volume.raw")
    for name in STRUCTURES:
        _save(getattr(truth, name), out / f"{name}.nrrd", manifest)
    truth.centerline.to_csv(out / "centerline.csv")
    manifest.add_output(out / "centerline.csv")
    start, end = (",".join(f"{v:.4f}" for v in p) for p in (truth.seeds.start, truth.seeds.end))
    info = {"spec": spec.to_dict(), "seeds": {"start": start, "end": end},
            "ds2": truth.ds2, "mla_mm2": truth.mla, "mld_mm": truth.mld,
            "volume": str(vol_path)}
    _write_json(info, out / "truth.json", manifest)
    print(f"--input {vol_path} --start {start} --end {end}")


def _recipes():
    from .phantom import default_recipes

    return default_recipes()


def _phantom_spec_from_toml(path) -> PhantomSpec:
    try:
        with open(path, "rb") as fh:
            data = config_mod.tomllib.load(fh)
    except OSError as exc:
        raise InputError(f"{path}: cannot read ({exc.strerror or exc})") from exc
    except config_mod.tomllib.TOMLDecodeError as exc:
        raise InputError(f"{path}: {exc}") from exc
    base_name = data.pop("recipe", None)
    try:
        base = recipe(base_name) if base_name else PhantomSpec()
        for key in ("spacing", "dims", "origin"):
            if key in data:
                data[key] = tuple(data[key])
        if "blobs" in data:
            data["blobs"] = tuple(data["blobs"])
        return replace(base, **data)
    except KeyError as exc:
        raise InputError(f"{path}: {exc.args[0]}") from exc
    except TypeError as exc:
        raise InputError(f"{path}: {exc}") from exc


COMMANDS = {
    "segment": cmd_segment, "centerline": cmd_centerline, "memberships": cmd_memberships,
    "vesselness": cmd_vesselness, "mesh": cmd_mesh, "metrics": cmd_metrics,
    "compare": cmd_compare, "phantom": cmd_phantom,
}

# errors caused by the user's inputs; everything else numerical is exit 2
INPUT_ERRORS = (InputError, VolumeIOError, MeshIOError, BoundsError, GridError, EmptySelectionError,
                MetricError, FileNotFoundError, PermissionError, IsADirectoryError)
NUMERIC_ERRORS = (StageError, LevelSetError, TrappedBacktraceError, FloatingPointError,
                  ArithmeticError, np.linalg.LinAlgError)


def _configure_logging():
    level = os.environ.get(LOG_ENV, "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    log.setLevel(getattr(logging, level, logging.WARNING))


def _fallback_manifest_path(argv) -> Path:
    """Where the manifest goes when argument parsing failed."""
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--out")
    pre.add_argument("--manifest")
    known, _ = pre.parse_known_args(argv)
    if known.manifest:
        return Path(known.manifest)
    if known.out:
        return Path(known.out) / "manifest.json"
    return Path("cta_recon_manifest.json")


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    _configure_logging()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        sys.stderr.write(exc.usage)
        sys.stderr.write(f"cta-recon: error: {exc}\n")
        manifest = RunManifest(argv[0] if argv else None, argv)
        manifest.finish(EXIT_INPUT, f"usage: {exc}")
        try:
            manifest.write(_fallback_manifest_path(argv))
        except OSError as wexc:
            log.error("cannot write manifest: %s", wexc)
        return EXIT_INPUT

    manifest = RunManifest(args.command, argv)
    code, error = EXIT_OK, None
    try:
        COMMANDS[args.command](args, manifest)
    except NUMERIC_ERRORS as exc:
        code, error = EXIT_NUMERIC, exc
    except INPUT_ERRORS as exc:
        code, error = EXIT_INPUT, exc
    except (OSError, ValueError, KeyError, TypeError) as exc:
        code, error = EXIT_INPUT, exc
    except Exception as exc:  # noqa: BLE001 - the manifest must still be written
        log.debug("unexpected failure", exc_info=True)
        code, error = EXIT_NUMERIC, exc
    if error is not None:
        sys.stderr.write(f"cta-recon {args.command}: error: {error}\n")
    manifest.finish(code, error)

    if args.command == "phantom" and args.list:
        return code
    mpath = args.manifest or (Path(args.out) / "manifest.json" if getattr(args, "out", None)
                              else Path("cta_recon_manifest.json"))
    try:
        manifest.write(mpath)
    except OSError as exc:
        sys.stderr.write(f"cta-recon: cannot write manifest {mpath}: {exc}\n")
        return code or EXIT_INPUT
    log.info("manifest written to %s", mpath)
    return code


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
