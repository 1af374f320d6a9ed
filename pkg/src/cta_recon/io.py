"""Volume and mask I/O: NRRD, raw data with a JSON sidecar, DICOM series.

Arrays are indexed ``[x, y, z]``; raw files store x fastest.  Rescale
slope and intercept (HU) are applied on load.
"""
from __future__ import annotations

import io
import json
import logging
import re
from pathlib import Path

import numpy as np

from .grid import BinaryMask, GridError, VoxelGrid

log = logging.getLogger("cta_recon")

SIDECAR_KEYS = {"dims", "spacing", "origin", "scalar_type", "endianness", "data_file",
                "rescale_slope", "rescale_intercept", "kind"}
_SCALARS = {"uint8", "int8", "uint16", "int16", "uint32", "int32", "float32", "float64"}


class VolumeIOError(OSError):
    """A volume could not be read or written; the message names the path."""


def _fail(path, msg):
    raise VolumeIOError(f"{path}: {msg}")


def detect_format(path) -> str:
    p = Path(path)
    if p.is_dir():
        return "dicom"
    ext = p.suffix.lower()
    if ext in (".nrrd", ".nhdr"):
        return "nrrd"
    if ext in (".json", ".raw"):
        return "raw"
    if ext == ".dcm":
        return "dicom"
    _fail(path, "unrecognised volume format (expected .nrrd, .nhdr, .raw/.json or a DICOM directory)")


def _nrrd_geometry(header, path):
    if "space directions" in header and header["space directions"] is not None:
        dirs = np.asarray(header["space directions"], dtype=float)
        dirs = dirs[~np.all(np.isnan(dirs), axis=1)] if dirs.ndim == 2 else dirs
        if dirs.shape != (3, 3):
            _fail(path, f"unsupported space directions {dirs.tolist()}")
        off = dirs - np.diag(np.diag(dirs))
        if np.abs(off).max() > 1e-6 * np.abs(dirs).max():
            _fail(path, "oblique space directions are not supported")
        spacing = np.abs(np.diag(dirs))
    elif "spacings" in header:
        spacing = np.asarray(header["spacings"], dtype=float)
    else:
        spacing = np.ones(3)
    origin = np.asarray(header.get("space origin", np.zeros(3)), dtype=float)
    return tuple(spacing), tuple(origin)


def _read_nrrd(path):
    import nrrd

    try:
        data, header = nrrd.read(str(path), index_order="F")
    except (OSError, nrrd.NRRDError) as exc:
        _fail(path, f"cannot read NRRD ({exc})")
    if data.ndim != 3:
        _fail(path, f"expected a 3-D volume, got {data.ndim} dimensions")
    spacing, origin = _nrrd_geometry(header, path)
    # optional custom fields written by scanners' converters
    slope = float(header.get("rescale_slope", 1.0))
    inter = float(header.get("rescale_intercept", 0.0))
    return data, spacing, origin, slope, inter


def _sidecar_paths(path):
    p = Path(path)
    if p.suffix.lower() == ".json":
        return p, None
    return p.with_suffix(".json"), p


def _read_raw(path):
    meta_path, data_path = _sidecar_paths(path)
    try:
        meta = json.loads(meta_path.read_text())
    except OSError as exc:
        _fail(meta_path, f"cannot read sidecar ({exc.strerror or exc})")
    except json.JSONDecodeError as exc:
        _fail(meta_path, f"malformed JSON sidecar ({exc})")
    unknown = set(meta) - SIDECAR_KEYS
    if unknown:
        _fail(meta_path, f"unknown sidecar key(s) {sorted(unknown)}")
    for key in ("dims", "spacing", "scalar_type"):
        if key not in meta:
            _fail(meta_path, f"sidecar is missing {key!r}")
    if meta["scalar_type"] not in _SCALARS:
        _fail(meta_path, f"unsupported scalar type {meta['scalar_type']!r}")
    if meta.get("endianness", "little") != "little":
        _fail(meta_path, "only little-endian raw data is supported")
    if data_path is None:
        data_path = meta_path.parent / meta.get("data_file", meta_path.with_suffix(".raw").name)
    dims = tuple(int(d) for d in meta["dims"])
    dtype = np.dtype(meta["scalar_type"]).newbyteorder("<")
    try:
        flat = np.fromfile(data_path, dtype=dtype)
    except OSError as exc:
        _fail(data_path, f"cannot read raw data ({exc.strerror or exc})")
    if flat.size != int(np.prod(dims)):
        _fail(data_path, f"holds {flat.size} values, sidecar dims {dims} need {int(np.prod(dims))}")
    data = flat.reshape(dims, order="F")
    return (data, tuple(meta["spacing"]), tuple(meta.get("origin", (0.0, 0.0, 0.0))),
            float(meta.get("rescale_slope", 1.0)), float(meta.get("rescale_intercept", 0.0)))


def _read_dicom(path):
    try:
        import pydicom
    except ImportError:  # pragma: no cover
        _fail(path, "DICOM input needs the optional 'pydicom' package")
    p = Path(path)
    files = sorted(p.iterdir()) if p.is_dir() else [p]
    slices = []
    for f in files:
        if not f.is_file():
            continue
        try:
            ds = pydicom.dcmread(str(f))
        except Exception:  # noqa: BLE001 - non-DICOM files in the folder are skipped
            continue
        if "PixelData" in ds:
            slices.append(ds)
    if not slices:
        _fail(path, "no DICOM image slices found")
    row, col = (np.asarray(slices[0].ImageOrientationPatient, dtype=float).reshape(2, 3)
                if "ImageOrientationPatient" in slices[0] else np.eye(3)[:2])
    normal = np.cross(row, col)
    pos = np.array([np.asarray(getattr(s, "ImagePositionPatient", (0, 0, i)), dtype=float)
                    for i, s in enumerate(slices)])
    order = np.argsort(pos @ normal, kind="stable")
    slices = [slices[i] for i in order]
    pos = pos[order]
    dz = float(np.median(np.diff(pos @ normal))) if len(slices) > 1 else float(
        getattr(slices[0], "SliceThickness", 1.0))
    if not dz > 0:
        _fail(path, "duplicate slice positions")
    sy, sx = (float(v) for v in slices[0].PixelSpacing)
    stack = np.stack([s.pixel_array.astype(np.float64).T for s in slices], axis=2)
    slope = float(getattr(slices[0], "RescaleSlope", 1.0))
    inter = float(getattr(slices[0], "RescaleIntercept", 0.0))
    return stack, (sx, sy, dz), tuple(pos[0]), slope, inter


def load_volume(path, fmt: str | None = None) -> VoxelGrid:
    """Read an intensity volume (HU) from NRRD, raw+JSON or DICOM."""
    if not Path(path).exists():
        _fail(path, "no such file or directory")
    fmt = fmt or detect_format(path)
    reader = {"nrrd": _read_nrrd, "raw": _read_raw, "dicom": _read_dicom}.get(fmt)
    if reader is None:
        raise GridError(f"unknown volume format {fmt!r}")
    data, spacing, origin, slope, inter = reader(path)
    values = np.asarray(data, dtype=np.float64) * slope + inter
    if not np.all(np.isfinite(values)):
        _fail(path, "volume contains non-finite values")
    grid = VoxelGrid(values.shape, spacing, origin, values, "intensity")
    if grid.anisotropy_warning():
        log.warning("%s: in-plane spacing differs by more than 1%% (%s); distances use sx",
                    path, grid.spacing[:2])
    return grid


def load_mask(path, fmt: str | None = None) -> BinaryMask:
    """Read a mask (any non-zero voxel is foreground) or a phi grid (positive
    values are foreground)."""
    g = load_volume(path, fmt)
    return BinaryMask(g.dims, g.spacing, g.origin, g.values > 0)


def load_grid(path, kind: str = "intensity", fmt: str | None = None) -> VoxelGrid:
    g = load_volume(path, fmt)
    return g.with_values(g.values, kind=kind)


def _as_array(obj):
    if isinstance(obj, BinaryMask):
        return obj.values.astype(np.uint8)
    return np.asarray(obj.values)


def _strip_timestamp(blob: bytes) -> bytes:
    # pynrrd stamps the write time into a header comment; identical data must
    # give identical files
    return re.sub(rb"\n# on [^\n]*\(GMT\)\.\n", b"\n", blob, count=1)


def save_volume(obj, path, fmt: str | None = None, dtype=None) -> Path:
    """Write a VoxelGrid or BinaryMask.  Masks are stored as uint8; ``.json``
    or ``.raw`` paths write a raw file plus sidecar."""
    path = Path(path)
    fmt = fmt or ("raw" if path.suffix.lower() in (".json", ".raw") else "nrrd")
    data = _as_array(obj)
    if dtype is not None:
        data = data.astype(dtype)
    elif data.dtype == np.float64 and not isinstance(obj, BinaryMask):
        data = data.astype(np.float32) if obj.kind != "phi" else data
    try:
        if fmt == "nrrd":
            import nrrd

            header = {
                "space": "left-posterior-superior",
                "space directions": np.diag(obj.spacing),
                "space origin": np.asarray(obj.origin, dtype=float),
                "kinds": ["domain", "domain", "domain"],
                "encoding": "gzip",
            }
            buf = io.BytesIO()
            nrrd.write(buf, np.ascontiguousarray(data), header, index_order="F")
            path.write_bytes(_strip_timestamp(buf.getvalue()))
        elif fmt == "raw":
            meta_path = path.with_suffix(".json")
            raw_path = path.with_suffix(".raw")
            np.asarray(data).astype(data.dtype.newbyteorder("<")).ravel(order="F").tofile(raw_path)
            meta = {
                "dims": list(obj.dims), "spacing": list(obj.spacing),
                "origin": list(obj.origin), "scalar_type": data.dtype.name,
                "endianness": "little", "data_file": raw_path.name,
            }
            meta_path.write_text(json.dumps(meta, indent=2) + "\n")
            path = meta_path
        else:
            raise GridError(f"cannot write volume format {fmt!r}")
    except OSError as exc:
        if isinstance(exc, VolumeIOError):
            raise
        _fail(path, f"cannot write ({exc.strerror or exc})")
    return path


def parse_point(text: str) -> tuple:
    """``"x,y,z"`` to a float triple."""
    parts = [p for p in str(text).replace(";", ",").split(",") if p.strip()]
    if len(parts) != 3:
        raise GridError(f"expected three comma-separated numbers, got {text!r}")
    try:
        return tuple(float(p) for p in parts)
    except ValueError:
        raise GridError(f"expected three comma-separated numbers, got {text!r}") from None


def ensure_dir(path) -> Path:
    p = Path(path)
    try:
        p.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        _fail(p, f"cannot create output directory ({exc.strerror or exc})")
    return p


__all__ = ["VolumeIOError", "detect_format", "ensure_dir", "load_grid", "load_mask",
           "load_volume", "parse_point", "save_volume"]
