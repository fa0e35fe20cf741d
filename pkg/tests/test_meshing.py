import numpy as np
import pytest
from scipy.ndimage import gaussian_filter

from sparseview.errors import EmptyMesh
from sparseview.meshing import (
    Mesh,
    clean_mesh,
    euler_characteristic,
    export_colored_points,
    export_mesh,
    is_watertight,
    load_mesh,
    marching_cubes,
    sample_surface,
)


def sphere_field(res=64, r=0.5, tau=0.02):
    ax = np.linspace(-1, 1, res)
    x, y, z = np.meshgrid(ax, ax, ax, indexing="ij")
    sdf = np.sqrt(x * x + y * y + z * z) - r
    return 1.0 / (1.0 + np.exp(sdf / tau))


class TestMarchingCubes:
    def test_constant_field_empty(self):
        mesh = marching_cubes(np.full((4, 4, 4), 0.2), 0.5, (0, 0, 0), (1, 1, 1))
        assert len(mesh.vertices) == 0 and len(mesh.triangles) == 0

    def test_sphere_oracle(self):
        mesh = marching_cubes(sphere_field(), 0.5, (-1, -1, -1), (1, 1, 1))
        radii = np.linalg.norm(mesh.vertices, axis=1)
        cell_diag = np.sqrt(3) * 2 / 64
        assert np.abs(radii - 0.5).max() < cell_diag
        assert is_watertight(mesh)
        assert euler_characteristic(mesh) == 2

    def test_single_interior_point(self):
        f = np.zeros((5, 5, 5))
        f[2, 2, 2] = 1.0
        mesh = marching_cubes(f, 0.5, (0, 0, 0), (1, 1, 1))
        assert is_watertight(mesh)
        assert euler_characteristic(mesh) == 2

    def test_outward_normals(self):
        mesh = marching_cubes(sphere_field(), 0.5, (-1, -1, -1), (1, 1, 1))
        n = mesh.face_normals()
        centers = mesh.vertices[mesh.triangles].mean(axis=1)
        assert ((n * centers).sum(axis=1) > 0).all()

    def test_threshold_symmetry(self):
        rng = np.random.default_rng(0)
        f = gaussian_filter(rng.random((18, 18, 18)), 2.0)
        a = marching_cubes(f, 0.5, (0, 0, 0), (1, 1, 1))
        b = marching_cubes(1.0 - f, 0.5, (0, 0, 0), (1, 1, 1))
        va = np.array(sorted(map(tuple, np.round(a.vertices, 9))))
        vb = np.array(sorted(map(tuple, np.round(b.vertices, 9))))
        assert va.shape == vb.shape
        assert np.allclose(va, vb, atol=1e-9)
        # orientation flips: total signed volume negates
        def signed_volume(m):
            v = m.vertices[m.triangles]
            return np.einsum("ij,ij->i", v[:, 0], np.cross(v[:, 1], v[:, 2])).sum() / 6

        assert signed_volume(a) == pytest.approx(-signed_volume(b), rel=1e-6)

    def test_vertices_interpolate_crossings(self):
        # a tilted plane: x + 0.3 y - 0.2 z = 0.1 as occupancy ramp
        ax = np.linspace(-1, 1, 32)
        x, y, z = np.meshgrid(ax, ax, ax, indexing="ij")
        f = 0.5 + (x + 0.3 * y - 0.2 * z - 0.1)
        mesh = marching_cubes(f, 0.5, (-1, -1, -1), (1, 1, 1))
        v = mesh.vertices
        err = np.abs(v[:, 0] + 0.3 * v[:, 1] - 0.2 * v[:, 2] - 0.1)
        assert err.max() < 1e-9

    def test_determinism(self):
        f = sphere_field(32)
        a = marching_cubes(f, 0.5, (-1, -1, -1), (1, 1, 1))
        b = marching_cubes(f, 0.5, (-1, -1, -1), (1, 1, 1))
        assert np.array_equal(a.vertices, b.vertices)
        assert np.array_equal(a.triangles, b.triangles)

    def test_exact_threshold_counts_inside(self):
        # a block of lattice values exactly at the threshold is occupied:
        # the surface wraps it with nonzero area (outside ties would drop it)
        f = np.zeros((4, 4, 4))
        f[1:3, 1:3, 1:3] = 0.5
        mesh = marching_cubes(f, 0.5, (0, 0, 0), (1, 1, 1))
        assert len(mesh.triangles) > 0
        assert is_watertight(mesh)


class TestMeshUtils:
    def test_clean_mesh_merges_duplicates(self):
        verts = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 0]], dtype=float)
        tris = np.array([[0, 1, 2], [3, 1, 2]])
        cleaned = clean_mesh(Mesh(verts, tris))
        assert len(cleaned.vertices) == 3
        assert len(cleaned.triangles) == 2

    def test_clean_mesh_drops_degenerate(self):
        verts = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0]], dtype=float)
        tris = np.array([[0, 1, 2], [0, 1, 1]])
        cleaned = clean_mesh(Mesh(verts, tris))
        assert len(cleaned.triangles) == 1

    def test_sample_surface_area_uniform(self):
        # two triangles, one 9x larger: sample counts should split ~9:1
        verts = np.array(
            [[0, 0, 0], [1, 0, 0], [0, 1, 0], [10, 0, 0], [13, 0, 0], [10, 3, 0]],
            dtype=float,
        )
        tris = np.array([[0, 1, 2], [3, 4, 5]])
        pts, _ = sample_surface(Mesh(verts, tris), 20_000, np.random.default_rng(0))
        frac_big = (pts[:, 0] >= 5).mean()
        assert abs(frac_big - 0.9) < 0.02

    def test_sample_surface_empty_raises(self):
        with pytest.raises(EmptyMesh):
            sample_surface(Mesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=int)), 10,
                           np.random.default_rng(0))


class TestMeshIO:
    def test_obj_round_trip(self, tmp_path):
        mesh = marching_cubes(sphere_field(24), 0.5, (-1, -1, -1), (1, 1, 1))
        path = tmp_path / "m.obj"
        export_mesh(mesh, path)
        loaded = load_mesh(path)
        assert len(loaded.vertices) == len(mesh.vertices)
        assert np.array_equal(loaded.triangles, mesh.triangles)
        # 9 significant digits survive the round trip
        assert np.allclose(loaded.vertices, mesh.vertices, rtol=1e-8, atol=1e-12)

    def test_empty_mesh_files(self, tmp_path):
        empty = Mesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=int))
        for fmt in ("obj", "ply"):
            path = tmp_path / f"empty.{fmt}"
            export_mesh(empty, path, fmt=fmt)
            assert path.exists()
        assert len(load_mesh(tmp_path / "empty.obj").vertices) == 0

    def test_ply_export(self, tmp_path):
        mesh = Mesh(np.eye(3), np.array([[0, 1, 2]]))
        path = tmp_path / "m.ply"
        export_mesh(mesh, path, fmt="ply")
        text = path.read_text()
        assert "element vertex 3" in text and "element face 1" in text

    def test_colored_points(self, tmp_path):
        pts = np.random.default_rng(0).normal(size=(5, 3))
        colors = np.full((5, 3), 200, dtype=np.uint8)
        path = tmp_path / "cloud.ply"
        export_colored_points(pts, colors, path)
        lines = path.read_text().splitlines()
        assert "property uchar red" in lines
        assert len(lines[lines.index("end_header") + 1 :]) == 5
