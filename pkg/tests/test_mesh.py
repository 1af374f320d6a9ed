import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import ndimage

from cta_recon.grid import GridError, VoxelGrid
from cta_recon.mesh import (MeshIOError, TriangleMesh, export_mesh, laplacian_smooth,
                            marching_cubes, read_mesh)

from conftest import sphere_phi


@pytest.fixture(scope="module")
def sphere():
    return marching_cubes(VoxelGrid.from_array(sphere_phi(31, 10.0), kind="phi"), label="lumen")


def test_sphere_outward_and_clean(sphere):
    c = np.full(3, 15.0)
    n = sphere.face_normals()
    centroids = sphere.vertices[sphere.triangles].mean(axis=1)
    assert np.all(np.einsum("ij,ij->i", n, centroids - c) > 0)
    assert sphere.problems() == []
    assert sphere.is_watertight()
    assert np.all(sphere.edge_counts() == 2)
    assert abs(sphere.area() - 400 * np.pi) / (400 * np.pi) <= 0.03
    assert sphere.signed_volume() > 0


def test_sphere_anisotropic_world_units():
    sp = (0.4, 0.4, 0.5)
    r = 4.0
    phi = sphere_phi(31, r, spacing=sp, centre=(6.0, 6.0, 7.5))
    mesh = marching_cubes(VoxelGrid.from_array(phi, sp, kind="phi"))
    assert abs(mesh.area() - 4 * np.pi * r**2) / (4 * np.pi * r**2) <= 0.03
    assert abs(mesh.signed_volume() - 4 / 3 * np.pi * r**3) / (4 / 3 * np.pi * r**3) <= 0.03


def test_smoothed_cube_volume():
    # a half-voxel blur turns the mask into a level-set field; wider blurs
    # round the edges enough to lose volume on their own (5% at sigma 0.85)
    m = np.zeros((24, 24, 24))
    m[6:18, 6:18, 6:18] = 1.0
    phi = ndimage.gaussian_filter(m, 0.5) - 0.5
    mesh = marching_cubes(VoxelGrid.from_array(phi, kind="phi"))
    assert mesh.is_watertight()
    assert np.all(mesh.edge_counts() == 2)
    assert abs(mesh.signed_volume() - 12.0**3) / 12.0**3 <= 0.05


def test_vertices_on_lattice_edges():
    sp = (0.4, 0.5, 0.7)
    origin = (1.0, -2.0, 3.0)
    rng = np.random.default_rng(0)
    phi = ndimage.gaussian_filter(rng.normal(size=(14, 15, 16)), 2.0)
    mesh = marching_cubes(VoxelGrid.from_array(phi, sp, origin, kind="phi"))
    idx = (mesh.vertices - origin) / sp
    on_lattice = np.abs(idx - np.round(idx)) <= 1e-9
    # exactly two coordinates are integral; the third lies strictly between
    assert np.all(on_lattice.sum(axis=1) == 2)


@given(st.integers(0, 2**31 - 1), st.floats(0.8, 2.5))
def test_random_closed_fields_are_watertight(seed, sigma):
    rng = np.random.default_rng(seed)
    v = ndimage.gaussian_filter(rng.normal(size=(12, 12, 12)), sigma)
    v = np.pad(v - v.mean(), 1, constant_values=-1.0)
    if (v > 0).sum() == 0:
        return
    mesh = marching_cubes(VoxelGrid.from_array(v, kind="phi"))
    assert mesh.is_watertight()
    assert mesh.signed_volume() > 0
    assert mesh.problems() == []


def test_iso_out_of_range():
    g = VoxelGrid.from_array(sphere_phi(9, 3.0), kind="phi")
    with pytest.raises(GridError, match="no isosurface"):
        marching_cubes(g, iso=100.0)
    with pytest.raises(GridError, match="no isosurface"):
        marching_cubes(g.with_values(np.zeros((9, 9, 9))))


def test_single_triangle_stl(tmp_path):
    tri = TriangleMesh(np.array([[0.0, 0, 0], [1.0, 0, 0], [0.0, 1, 0]]), [[0, 1, 2]])
    export_mesh(tri, tmp_path / "t.stl")
    data = (tmp_path / "t.stl").read_bytes()
    assert len(data) == 134
    assert int.from_bytes(data[80:84], "little") == 1
    normal = np.frombuffer(data[84:96], "<f4")
    np.testing.assert_array_equal(normal, [0, 0, 1])
    assert data[-2:] == b"\x00\x00"


@pytest.mark.parametrize("ext", ["stl", "obj", "ply"])
def test_round_trip(ext, sphere, tmp_path):
    p = tmp_path / f"s.{ext}"
    export_mesh(sphere, p)
    back = read_mesh(p)
    assert back.n_triangles == sphere.n_triangles
    a = np.sort(back.vertices[back.triangles].reshape(-1, 3), axis=0)
    b = np.sort(sphere.vertices[sphere.triangles].reshape(-1, 3).astype(np.float32), axis=0)
    np.testing.assert_allclose(a, b, rtol=0, atol=1e-5)
    assert back.is_watertight()
    assert back.label == "lumen"


def test_obj_is_one_based(sphere, tmp_path):
    export_mesh(sphere, tmp_path / "s.obj")
    faces = [ln for ln in (tmp_path / "s.obj").read_text().splitlines() if ln.startswith("f ")]
    idx = np.array([[int(t) for t in ln.split()[1:]] for ln in faces])
    assert idx.min() == 1 and idx.max() == sphere.n_vertices


def test_ply_header(sphere, tmp_path):
    export_mesh(sphere, tmp_path / "s.ply")
    lines = (tmp_path / "s.ply").read_text().splitlines()
    assert lines[:2] == ["ply", "format ascii 1.0"]
    assert f"element vertex {sphere.n_vertices}" in lines
    assert f"element face {sphere.n_triangles}" in lines


def test_export_errors(sphere, tmp_path):
    with pytest.raises(GridError):
        export_mesh(sphere, tmp_path / "s.xyz")
    with pytest.raises(MeshIOError, match="missing"):
        export_mesh(sphere, tmp_path / "missing" / "s.stl")
    with pytest.raises(GridError):
        export_mesh(TriangleMesh(np.zeros((0, 3)), np.zeros((0, 3))), tmp_path / "e.stl")


def test_truncated_stl(tmp_path):
    (tmp_path / "bad.stl").write_bytes(b"\x00" * 90)
    with pytest.raises(MeshIOError):
        read_mesh(tmp_path / "bad.stl")


def test_index_validation():
    with pytest.raises(GridError):
        TriangleMesh(np.zeros((2, 3)), [[0, 1, 2]])


def test_laplacian_smoothing(sphere):
    rng = np.random.default_rng(0)
    noisy = TriangleMesh(sphere.vertices + rng.normal(0, 0.2, sphere.vertices.shape),
                         sphere.triangles)
    smooth = laplacian_smooth(noisy, 0.5, 10)
    np.testing.assert_array_equal(smooth.triangles, noisy.triangles)
    assert smooth.area() < noisy.area()
    assert laplacian_smooth(noisy, 0.5, 0).vertices.tolist() == noisy.vertices.tolist()
    with pytest.raises(GridError):
        laplacian_smooth(noisy, 1.5)


def test_deterministic_bytes(tmp_path):
    g = VoxelGrid.from_array(sphere_phi(21, 6.0), kind="phi")
    for i in range(2):
        export_mesh(marching_cubes(g), tmp_path / f"{i}.stl")
    assert (tmp_path / "0.stl").read_bytes() == (tmp_path / "1.stl").read_bytes()
