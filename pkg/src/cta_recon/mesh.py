"""Isosurface extraction by marching cubes, mesh measures and file export.

Vertices are shared between cells through a key per lattice edge
(``3 * linear_index + axis``), so closed surfaces come out watertight and
the vertex order is deterministic.  Triangles are wound so that normals
point toward ``phi < iso``.
"""
from __future__ import annotations

import os
import struct
from dataclasses import dataclass

import numpy as np
from scipy import sparse

from ._mc_tables import CORNERS, EDGES, TRIANGLES
from .grid import GridError, VoxelGrid
from .validation import check_grid

FORMATS = ("stl_binary", "obj", "ply_ascii")
_EXT = {".stl": "stl_binary", ".obj": "obj", ".ply": "ply_ascii"}

# interpolation parameter kept off the lattice points so no triangle collapses
_T_EPS = 1e-4

_TABLE = np.full((256, 15), -1, dtype=np.int64)
for _c, _row in enumerate(TRIANGLES):
    _TABLE[_c, :len(_row)] = _row
_CORNER = np.array(CORNERS)
# each edge as (lower corner offset, axis)
_EDGE_LO = np.array([np.minimum(_CORNER[a], _CORNER[b]) for a, b in EDGES])
_EDGE_AXIS = np.array([int(np.argmax(np.abs(_CORNER[a] - _CORNER[b]))) for a, b in EDGES])


class MeshIOError(OSError):
    """Reading or writing a mesh file failed."""


@dataclass
class TriangleMesh:
    vertices: np.ndarray
    triangles: np.ndarray
    label: str = "surface"

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=float).reshape(-1, 3)
        self.triangles = np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        if len(self.triangles) and (self.triangles.min() < 0
                                    or self.triangles.max() >= len(self.vertices)):
            raise GridError("triangle index out of range")

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_triangles(self) -> int:
        return len(self.triangles)

    def _corners(self):
        v = self.vertices[self.triangles]
        return v[:, 0], v[:, 1], v[:, 2]

    def face_normals(self, unit: bool = True) -> np.ndarray:
        a, b, c = self._corners()
        n = np.cross(b - a, c - a)
        if unit:
            ln = np.linalg.norm(n, axis=1, keepdims=True)
            n = np.divide(n, ln, out=np.zeros_like(n), where=ln > 0)
        return n

    def triangle_areas(self) -> np.ndarray:
        return 0.5 * np.linalg.norm(self.face_normals(unit=False), axis=1)

    def area(self) -> float:
        return float(self.triangle_areas().sum())

    def signed_volume(self) -> float:
        """Enclosed volume by the divergence theorem; positive when normals
        point outward."""
        a, b, c = self._corners()
        return float(np.einsum("ij,ij->i", a, np.cross(b, c)).sum() / 6.0)

    def edge_counts(self) -> np.ndarray:
        e = np.sort(self.triangles[:, [0, 1, 1, 2, 2, 0]].reshape(-1, 2), axis=1)
        _, counts = np.unique(e, axis=0, return_counts=True)
        return counts

    def is_watertight(self) -> bool:
        return self.n_triangles > 0 and bool(np.all(self.edge_counts() == 2))

    def problems(self, tol: float = 1e-12) -> list:
        out = []
        t = self.triangles
        if np.any((t[:, 0] == t[:, 1]) | (t[:, 1] == t[:, 2]) | (t[:, 0] == t[:, 2])):
            out.append("triangle with repeated vertices")
        if np.any(self.triangle_areas() <= tol):
            out.append("zero-area triangle")
        return out


def marching_cubes(phi: VoxelGrid, iso: float = 0.0, label: str = "surface") -> TriangleMesh:
    """Triangulate ``{phi = iso}`` with the 256-case table.

    Vertices sit on lattice edges at the linearly interpolated crossing and
    are returned in world millimetres.  A field that never crosses ``iso``
    raises ``GridError``.
    """
    phi = check_grid(phi, min_size=2)
    v = np.asarray(phi.values, dtype=float)
    if not np.all(np.isfinite(v)):
        raise GridError("phi contains non-finite values")
    below = v < iso
    if below.all() or not below.any():
        raise GridError(f"no isosurface at level {iso}")
    nx, ny, nz = v.shape
    case = np.zeros((nx - 1, ny - 1, nz - 1), dtype=np.int64)
    for c, (dx, dy, dz) in enumerate(CORNERS):
        case |= below[dx:nx - 1 + dx, dy:ny - 1 + dy, dz:nz - 1 + dz].astype(np.int64) << c
    cells = np.argwhere((case > 0) & (case < 255))
    cc = case[cells[:, 0], cells[:, 1], cells[:, 2]]

    # global key for each of the 12 edges of every active cell
    lo = cells[:, None, :] + _EDGE_LO[None, :, :]
    keys = ((lo[..., 0] * ny + lo[..., 1]) * nz + lo[..., 2]) * 3 + _EDGE_AXIS[None, :]

    tri_edges = _TABLE[cc].reshape(-1, 5, 3)
    valid = tri_edges[:, :, 0] >= 0
    cell_of = np.repeat(np.arange(len(cc)), 5).reshape(-1, 5)[valid]
    tri_keys = keys[cell_of[:, None], tri_edges[valid]]

    uniq, inverse = np.unique(tri_keys.ravel(), return_inverse=True)
    axis = uniq % 3
    lin = uniq // 3
    p0 = np.stack(np.unravel_index(lin, v.shape), axis=1)
    p1 = p0.copy()
    p1[np.arange(len(p1)), axis] += 1
    v0 = v[p0[:, 0], p0[:, 1], p0[:, 2]]
    v1 = v[p1[:, 0], p1[:, 1], p1[:, 2]]
    t = np.clip((iso - v0) / (v1 - v0), _T_EPS, 1.0 - _T_EPS)
    idx = p0.astype(float)
    idx[np.arange(len(idx)), axis] += t
    verts = np.asarray(phi.origin) + idx * np.asarray(phi.spacing)
    # the table winds triangles counter-clockwise seen from the set corners
    # (phi < iso), so normals already point outward
    return TriangleMesh(verts, inverse.reshape(-1, 3), label)


def laplacian_smooth(mesh: TriangleMesh, lam: float = 0.5, iterations: int = 10) -> TriangleMesh:
    """Uniform-weight Laplacian smoothing; connectivity is unchanged."""
    if not 0 < lam <= 1 or iterations < 0:
        raise GridError("smoothing needs 0 < lam <= 1 and iterations >= 0")
    n = mesh.n_vertices
    e = mesh.triangles[:, [0, 1, 1, 2, 2, 0]].reshape(-1, 2)
    e = np.vstack([e, e[:, ::-1]])
    adj = sparse.coo_matrix((np.ones(len(e)), (e[:, 0], e[:, 1])), shape=(n, n)).tocsr()
    adj.data[:] = 1.0
    deg = np.asarray(adj.sum(axis=1)).ravel()
    deg[deg == 0] = 1.0
    v = mesh.vertices.copy()
    for _ in range(iterations):
        v = v + lam * (adj @ v / deg[:, None] - v)
    return TriangleMesh(v, mesh.triangles.copy(), mesh.label)


def _format_for(path, fmt):
    if fmt is None:
        ext = os.path.splitext(str(path))[1].lower()
        if ext not in _EXT:
            raise GridError(f"cannot infer mesh format from {path!r}")
        return _EXT[ext]
    if fmt not in FORMATS:
        raise GridError(f"unknown mesh format {fmt!r}; expected one of {FORMATS}")
    return fmt


_STL_DTYPE = np.dtype([("normal", "<f4", (3,)), ("v", "<f4", (3, 3)), ("attr", "<u2")])


def _stl_bytes(mesh: TriangleMesh) -> bytes:
    header = f"cta_recon {mesh.label}".encode("ascii", "replace")[:80].ljust(80, b" ")
    rec = np.zeros(mesh.n_triangles, dtype=_STL_DTYPE)
    rec["normal"] = mesh.face_normals()
    rec["v"] = mesh.vertices[mesh.triangles]
    return header + struct.pack("<I", mesh.n_triangles) + rec.tobytes()


def _obj_text(mesh: TriangleMesh) -> str:
    lines = [f"# {mesh.label}", f"o {mesh.label}"]
    lines += [f"v {x:.9g} {y:.9g} {z:.9g}" for x, y, z in mesh.vertices]
    lines += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in mesh.triangles]
    return "\n".join(lines) + "\n"


def _ply_text(mesh: TriangleMesh) -> str:
    head = ["ply", "format ascii 1.0", f"comment {mesh.label}",
            f"element vertex {mesh.n_vertices}",
            "property float x", "property float y", "property float z",
            f"element face {mesh.n_triangles}",
            "property list uchar int vertex_indices", "end_header"]
    body = [f"{x:.9g} {y:.9g} {z:.9g}" for x, y, z in mesh.vertices]
    body += [f"3 {a} {b} {c}" for a, b, c in mesh.triangles]
    return "\n".join(head + body) + "\n"


def export_mesh(mesh: TriangleMesh, path, fmt: str | None = None) -> str:
    """Write ``mesh`` as binary STL, OBJ or ASCII PLY (inferred from the
    extension when ``fmt`` is None).  Returns the format written."""
    fmt = _format_for(path, fmt)
    if mesh.n_triangles == 0:
        raise GridError("cannot export an empty mesh")
    try:
        if fmt == "stl_binary":
            with open(path, "wb") as fh:
                fh.write(_stl_bytes(mesh))
        else:
            text = _obj_text(mesh) if fmt == "obj" else _ply_text(mesh)
            with open(path, "w") as fh:
                fh.write(text)
    except OSError as exc:
        raise MeshIOError(f"{path}: {exc.strerror or exc}") from exc
    return fmt


def _weld(points: np.ndarray):
    uniq, inverse = np.unique(points, axis=0, return_inverse=True)
    return uniq, inverse.reshape(-1, 3)


def read_mesh(path, fmt: str | None = None) -> TriangleMesh:
    """Read a mesh written by :func:`export_mesh`.  STL vertices are welded
    by exact coordinate."""
    fmt = _format_for(path, fmt)
    try:
        if fmt == "stl_binary":
            with open(path, "rb") as fh:
                data = fh.read()
            if len(data) < 84:
                raise MeshIOError(f"{path}: truncated STL")
            n = struct.unpack("<I", data[80:84])[0]
            if len(data) != 84 + 50 * n:
                raise MeshIOError(f"{path}: STL size does not match its triangle count")
            rec = np.frombuffer(data[84:], dtype=_STL_DTYPE, count=n)
            label = data[:80].decode("ascii", "replace").strip().removeprefix("cta_recon ")
            verts, tris = _weld(rec["v"].reshape(-1, 3).astype(float))
            return TriangleMesh(verts, tris, label or "surface")
        with open(path) as fh:
            lines = fh.read().splitlines()
    except OSError as exc:
        if isinstance(exc, MeshIOError):
            raise
        raise MeshIOError(f"{path}: {exc.strerror or exc}") from exc
    if fmt == "obj":
        v = [ln.split()[1:4] for ln in lines if ln.startswith("v ")]
        f = [[int(tok.split("/")[0]) - 1 for tok in ln.split()[1:4]]
             for ln in lines if ln.startswith("f ")]
        label = next((ln[2:] for ln in lines if ln.startswith("o ")), "surface")
        return TriangleMesh(np.array(v, dtype=float), np.array(f, dtype=np.int64), label)
    end = lines.index("end_header")
    nv = int(next(ln.split()[2] for ln in lines if ln.startswith("element vertex")))
    nf = int(next(ln.split()[2] for ln in lines if ln.startswith("element face")))
    label = next((ln[8:] for ln in lines[:end] if ln.startswith("comment ")), "surface")
    v = np.array([ln.split()[:3] for ln in lines[end + 1:end + 1 + nv]], dtype=float)
    f = np.array([ln.split()[1:4] for ln in lines[end + 1 + nv:end + 1 + nv + nf]],
                 dtype=np.int64)
    return TriangleMesh(v, f, label)


__all__ = ["FORMATS", "MeshIOError", "TriangleMesh", "export_mesh", "laplacian_smooth",
           "marching_cubes", "read_mesh"]
