"""Marching-cubes isosurface extraction and triangle-mesh utilities.

The extractor uses the standard 256-case lookup tables with linear
interpolation of edge crossings. Vertices are identified by the lattice
edge they sit on, so adjacent cubes share vertices exactly and the output
is crack-free. Lattice values exactly at the threshold count as inside
(deterministic topology).
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import EmptyMesh
from .mc_tables import EDGE_TABLE, TRI_TABLE

# Cube corners in (x, y, z) offsets, standard ordering.
_CORNERS = np.array(
    [
        [0, 0, 0], [1, 0, 0], [1, 1, 0], [0, 1, 0],
        [0, 0, 1], [1, 0, 1], [1, 1, 1], [0, 1, 1],
    ],
    dtype=np.int64,
)
_EDGE_PAIRS = np.array(
    [
        [0, 1], [1, 2], [2, 3], [3, 0],
        [4, 5], [5, 6], [6, 7], [7, 4],
        [0, 4], [1, 5], [2, 6], [3, 7],
    ],
    dtype=np.int64,
)
# For each cube edge: lattice offset of its low corner and its axis.
_EDGE_BASE = np.minimum(_CORNERS[_EDGE_PAIRS[:, 0]], _CORNERS[_EDGE_PAIRS[:, 1]])
_EDGE_AXIS = np.argmax(
    _CORNERS[_EDGE_PAIRS[:, 0]] != _CORNERS[_EDGE_PAIRS[:, 1]], axis=1
)


@dataclass
class Mesh:
    """Triangle mesh: float64 vertices (V, 3) and int index triples (F, 3)."""

    vertices: np.ndarray
    triangles: np.ndarray
    normals: np.ndarray | None = field(default=None)

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.triangles = np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        if len(self.triangles) and (
            self.triangles.min() < 0 or self.triangles.max() >= len(self.vertices)
        ):
            raise ValueError("triangle indices out of range")

    def __len__(self) -> int:
        return len(self.triangles)

    def translated(self, delta) -> "Mesh":
        return Mesh(self.vertices + np.asarray(delta, dtype=np.float64),
                    self.triangles, self.normals)

    def face_normals(self) -> np.ndarray:
        v = self.vertices
        t = self.triangles
        n = np.cross(v[t[:, 1]] - v[t[:, 0]], v[t[:, 2]] - v[t[:, 0]])
        lens = np.linalg.norm(n, axis=1, keepdims=True)
        return n / np.maximum(lens, 1e-30)

    def face_areas(self) -> np.ndarray:
        v = self.vertices
        t = self.triangles
        n = np.cross(v[t[:, 1]] - v[t[:, 0]], v[t[:, 2]] - v[t[:, 0]])
        return 0.5 * np.linalg.norm(n, axis=1)


def marching_cubes(values: np.ndarray, threshold: float, lo, hi) -> Mesh:
    """Extract the isosurface ``values == threshold`` from a scalar lattice.

    ``values`` has shape (R0, R1, R2) sampled at lattice points spanning the
    axis-aligned box [lo, hi] inclusively. Points with ``value >= threshold``
    are inside. Fields entirely on one side yield an empty mesh.
    """
    values = np.asarray(values, dtype=np.float64)
    if values.ndim != 3 or min(values.shape) < 2:
        raise ValueError("field must be 3D with at least 2 samples per axis")
    lo = np.asarray(lo, dtype=np.float64)
    hi = np.asarray(hi, dtype=np.float64)
    spacing = (hi - lo) / (np.array(values.shape) - 1)

    inside = values >= threshold
    # Case index per cube from the 8 shifted corner views.
    shape = np.array(values.shape) - 1
    case = np.zeros(shape, dtype=np.int32)
    for bit, (dx, dy, dz) in enumerate(_CORNERS):
        corner = inside[
            dx : dx + shape[0], dy : dy + shape[1], dz : dz + shape[2]
        ]
        # Bourke convention: bit set when the corner is below the isolevel.
        case |= (~corner).astype(np.int32) << bit

    active = np.flatnonzero((EDGE_TABLE[case.ravel()] != 0))
    if active.size == 0:
        return Mesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))
    ci, cj, ck = np.unravel_index(active, tuple(shape))
    acase = case.ravel()[active]

    # Global edge id = ((i * R1 + j) * R2 + k) * 3 + axis at the edge's low corner.
    r1, r2 = values.shape[1], values.shape[2]
    tri_edges = []
    rows = TRI_TABLE[acase]
    for t0 in range(0, 15, 3):
        mask = rows[:, t0] != -1
        if not mask.any():
            break
        sub = np.flatnonzero(mask)
        e = rows[sub][:, t0 : t0 + 3]
        ids = np.stack(
            [
                edge_ids_sub(e[:, 0], ci[sub], cj[sub], ck[sub], r1, r2),
                edge_ids_sub(e[:, 1], ci[sub], cj[sub], ck[sub], r1, r2),
                edge_ids_sub(e[:, 2], ci[sub], cj[sub], ck[sub], r1, r2),
            ],
            axis=1,
        )
        tri_edges.append(ids)
    tri_eids = np.concatenate(tri_edges, axis=0)

    used, tri_idx = np.unique(tri_eids, return_inverse=True)
    tris = tri_idx.reshape(-1, 3)

    # Interpolate one vertex per used lattice edge.
    eid = used
    axis = (eid % 3).astype(np.int64)
    lin = eid // 3
    k0 = lin % r2
    j0 = (lin // r2) % r1
    i0 = lin // (r2 * r1)
    p0 = np.stack([i0, j0, k0], axis=1)
    p1 = p0.copy()
    p1[np.arange(len(p1)), axis] += 1
    v0 = values[p0[:, 0], p0[:, 1], p0[:, 2]]
    v1 = values[p1[:, 0], p1[:, 1], p1[:, 2]]
    frac = (threshold - v0) / (v1 - v0)
    verts = lo + (p0 + frac[:, None] * (p1 - p0)) * spacing

    # Table order already orients normals away from the inside (higher values).
    return clean_mesh(Mesh(verts, tris))


def edge_ids_sub(local_edge, ci, cj, ck, r1, r2):
    base = _EDGE_BASE[local_edge]
    i = ci + base[:, 0]
    j = cj + base[:, 1]
    k = ck + base[:, 2]
    return ((i * r1 + j) * r2 + k) * 3 + _EDGE_AXIS[local_edge]


def clean_mesh(mesh: Mesh, eps: float = 1e-12) -> Mesh:
    """Merge coincident vertices and drop degenerate triangles.

    Only triangles that are topologically or geometrically degenerate
    (repeated vertex after merging, or area below ``eps``) are removed;
    generic fields produce none of these.
    """
    if len(mesh.vertices) == 0:
        return mesh
    # Exact-duplicate merge keeps the shared-edge identity intact.
    uniq, remap = np.unique(mesh.vertices, axis=0, return_inverse=True)
    tris = remap[mesh.triangles]
    ok = (
        (tris[:, 0] != tris[:, 1])
        & (tris[:, 1] != tris[:, 2])
        & (tris[:, 0] != tris[:, 2])
    )
    tris = tris[ok]
    m = Mesh(uniq, tris)
    if len(tris):
        m = Mesh(uniq, tris[m.face_areas() > eps])
    # Drop unreferenced vertices.
    if len(m.triangles):
        used, inv = np.unique(m.triangles.ravel(), return_inverse=True)
        m = Mesh(m.vertices[used], inv.reshape(-1, 3))
    else:
        m = Mesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))
    return m


def mesh_edges(mesh: Mesh) -> np.ndarray:
    """Undirected edges of all triangles, one row per incidence."""
    t = mesh.triangles
    e = np.concatenate([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]], axis=0)
    return np.sort(e, axis=1)


def is_watertight(mesh: Mesh) -> bool:
    """True when every undirected edge is shared by exactly two triangles."""
    if len(mesh.triangles) == 0:
        return False
    _, counts = np.unique(mesh_edges(mesh), axis=0, return_counts=True)
    return bool((counts == 2).all())


def euler_characteristic(mesh: Mesh) -> int:
    v = len(mesh.vertices)
    e = len(np.unique(mesh_edges(mesh), axis=0))
    f = len(mesh.triangles)
    return v - e + f


def export_mesh(mesh: Mesh, path, fmt: str | None = None, precision: int = 9) -> None:
    """Write an ASCII OBJ or PLY file (default 9 significant digits)."""
    path = str(path)
    if fmt is None:
        fmt = "ply" if path.endswith(".ply") else "obj"
    if fmt == "obj":
        p = precision
        lines = [f"v {x:.{p}g} {y:.{p}g} {z:.{p}g}" for x, y, z in mesh.vertices]
        lines += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in mesh.triangles]
        body = "\n".join(lines)
        with open(path, "w") as f:
            f.write(body + ("\n" if body else ""))
    elif fmt == "ply":
        with open(path, "w") as f:
            f.write("ply\nformat ascii 1.0\n")
            f.write(f"element vertex {len(mesh.vertices)}\n")
            f.write("property float x\nproperty float y\nproperty float z\n")
            f.write(f"element face {len(mesh.triangles)}\n")
            f.write("property list uchar int vertex_indices\nend_header\n")
            for x, y, z in mesh.vertices:
                f.write(f"{x:.9g} {y:.9g} {z:.9g}\n")
            for a, b, c in mesh.triangles:
                f.write(f"3 {a} {b} {c}\n")
    else:
        raise ValueError(f"unknown mesh format {fmt!r}")


def load_mesh(path) -> Mesh:
    """Read the ASCII OBJ subset written by :func:`export_mesh`."""
    verts, tris = [], []
    with open(path) as f:
        for line in f:
            parts = line.split()
            if not parts:
                continue
            if parts[0] == "v":
                verts.append([float(x) for x in parts[1:4]])
            elif parts[0] == "f":
                tris.append([int(p.split("/")[0]) - 1 for p in parts[1:4]])
    return Mesh(
        np.array(verts, dtype=np.float64).reshape(-1, 3),
        np.array(tris, dtype=np.int64).reshape(-1, 3),
    )


def export_colored_points(points: np.ndarray, colors: np.ndarray, path) -> None:
    """ASCII PLY point cloud with per-vertex uint8 RGB."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    colors = np.asarray(colors).reshape(-1, 3).astype(np.uint8)
    with open(path, "w") as f:
        f.write("ply\nformat ascii 1.0\n")
        f.write(f"element vertex {len(points)}\n")
        f.write("property float x\nproperty float y\nproperty float z\n")
        f.write("property uchar red\nproperty uchar green\nproperty uchar blue\n")
        f.write("end_header\n")
        for (x, y, z), (r, g, b) in zip(points, colors):
            f.write(f"{x:.9g} {y:.9g} {z:.9g} {r} {g} {b}\n")


def sample_surface(mesh: Mesh, n: int, rng) -> tuple[np.ndarray, np.ndarray]:
    """Area-uniform surface samples; returns (points (n,3), face normals (n,3))."""
    if len(mesh.triangles) == 0:
        raise EmptyMesh("cannot sample an empty mesh")
    areas = mesh.face_areas()
    total = areas.sum()
    if total <= 0:
        raise EmptyMesh("mesh has zero surface area")
    faces = rng.choice(len(areas), size=n, p=areas / total)
    u = rng.random(n)
    v = rng.random(n)
    flip = u + v > 1.0
    u[flip] = 1.0 - u[flip]
    v[flip] = 1.0 - v[flip]
    t = mesh.triangles[faces]
    a = mesh.vertices[t[:, 0]]
    b = mesh.vertices[t[:, 1]]
    c = mesh.vertices[t[:, 2]]
    pts = a + u[:, None] * (b - a) + v[:, None] * (c - a)
    return pts, mesh.face_normals()[faces]
