"""Scene generation and dataset serialization.

A sample is one procedural figure rendered from several calibrated views,
together with its exact occupancy oracle, a dense ground-truth mesh and the
figure center used to define the canonical frame.

On-disk layout::

    <out>/manifest.txt                  # "<split> <sample_id>" per line
    <out>/<split>/<sample_id>/view_<k>.png
                              mask_<k>.png
                              cam_<k>.txt
                              gt_mesh.obj
                              figure.json
                              center.txt
"""
from __future__ import annotations

import concurrent.futures
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .cameras import Camera, load_camera, mesh_center, save_camera
from .figures import FigureSpec, place_randomly, random_figure
from .meshing import Mesh, export_mesh, load_mesh, marching_cubes
from .render import render_view

BASE_AZIMUTHS = np.arange(8) * 45.0
DEFAULT_LOOK_AT = (0.0, 0.9, 0.0)
DEFAULT_RADIUS_RANGE = (3.4, 4.2)
DEFAULT_FOV_DEG = 80.0
GT_MESH_RES = 192


@dataclass(frozen=True)
class ViewPose:
    """Camera placement on a sphere around a look-at point."""

    azimuth_deg: float
    elevation_deg: float
    radius: float
    look_at: tuple[float, float, float] = DEFAULT_LOOK_AT

    def __post_init__(self):
        if not (0.0 <= self.elevation_deg <= 45.0):
            raise ValueError("elevation must lie in [0, 45] degrees")


def sample_views(
    n: int,
    rng: np.random.Generator,
    radius_range=DEFAULT_RADIUS_RANGE,
    look_at=DEFAULT_LOOK_AT,
    fixed_elevation: float | None = None,
    azimuth_jitter_deg: float = 20.0,
) -> list[ViewPose]:
    """Draw ``n`` camera poses spread around the up axis.

    Base azimuths are chosen evenly from the eight 45-degree directions to
    maximize angular spread, each offset by Uniform(-jitter, +jitter);
    elevations are Uniform(0, 45) unless ``fixed_elevation`` pins them.
    """
    if not 2 <= n <= 8:
        raise ValueError("view count must be in 2..8")
    idx = np.round(np.arange(n) * 8.0 / n).astype(int) % 8
    poses = []
    for k in idx:
        az = BASE_AZIMUTHS[k] + rng.uniform(-azimuth_jitter_deg, azimuth_jitter_deg)
        el = fixed_elevation if fixed_elevation is not None else rng.uniform(0.0, 45.0)
        poses.append(
            ViewPose(
                azimuth_deg=float(az),
                elevation_deg=float(el),
                radius=float(rng.uniform(*radius_range)),
                look_at=tuple(look_at),
            )
        )
    return poses


def pose_to_camera(pose: ViewPose, res: int, fov_deg: float = DEFAULT_FOV_DEG) -> Camera:
    f = (res / 2.0) / np.tan(np.radians(fov_deg) / 2.0)
    c = (res - 1) / 2.0
    K = np.array([[f, 0, c], [0, f, c], [0, 0, 1.0]])
    az = np.radians(pose.azimuth_deg)
    el = np.radians(pose.elevation_deg)
    look_at = np.asarray(pose.look_at, dtype=np.float64)
    pos = look_at + pose.radius * np.array(
        [np.sin(az) * np.cos(el), np.sin(el), np.cos(az) * np.cos(el)]
    )
    fwd = look_at - pos
    fwd /= np.linalg.norm(fwd)
    x = np.cross(fwd, np.array([0.0, -1.0, 0.0]))
    x /= np.linalg.norm(x)
    y = np.cross(fwd, x)
    R = np.stack([x, y, fwd])
    return Camera(K=K, R=R, t=-R @ pos, width=res, height=res)


def sample_sdf_grid(figure: FigureSpec, lo, hi, res: int, block: int = 4) -> np.ndarray:
    """Union SDF on a res^3 lattice over [lo, hi], with exact sign everywhere.

    Blocks of lattice points whose center is farther from the surface than
    the block diagonal (Lipschitz-1 bound) are filled with the center value;
    only near-surface blocks are evaluated densely. Values are exact
    wherever a sign change can occur.
    """
    lo = np.asarray(lo, dtype=np.float64)
    hi = np.asarray(hi, dtype=np.float64)
    h = (hi - lo) / (res - 1)
    starts = np.arange(0, res, block)
    ends = np.minimum(starts + block, res)
    counts = ends - starts
    mid = (starts + ends - 1) / 2.0

    cx, cy, cz = np.meshgrid(
        lo[0] + mid * h[0], lo[1] + mid * h[1], lo[2] + mid * h[2], indexing="ij"
    )
    centers = np.stack([cx, cy, cz], axis=-1).reshape(-1, 3)
    d_center = figure.sdf(centers).reshape(cx.shape)

    safe = np.linalg.norm(h * (block - 1) / 2.0) + 2.0 * np.linalg.norm(h)
    marked = np.abs(d_center) <= safe

    def expand(a):
        a = np.repeat(a, counts, axis=0)
        a = np.repeat(a, counts, axis=1)
        return np.repeat(a, counts, axis=2)

    out = expand(d_center)
    need = expand(marked)
    if need.any():
        ii, jj, kk = np.nonzero(need)
        pts = np.stack(
            [lo[0] + ii * h[0], lo[1] + jj * h[1], lo[2] + kk * h[2]], axis=1
        )
        out[ii, jj, kk] = figure.sdf(pts)
    return out


def extract_gt_mesh(figure: FigureSpec, res: int = GT_MESH_RES) -> Mesh:
    """Marching cubes on the exact SDF over the figure's bounding cube."""
    lo, hi = figure.aabb()
    center = (lo + hi) / 2.0
    half = float((hi - lo).max()) / 2.0 + 0.04
    lo_c, hi_c = center - half, center + half
    field = sample_sdf_grid(figure, lo_c, hi_c, res)
    return marching_cubes(-field, 0.0, lo_c, hi_c)


def render_scene(figure: FigureSpec, cameras) -> list[tuple[Camera, np.ndarray, np.ndarray]]:
    """Render the figure from each camera: (camera, rgb float [0,1], mask bool)."""
    views = []
    for cam in cameras:
        rgb8, mask8, _ = render_view(figure, cam)
        views.append((cam, rgb8.astype(np.float64) / 255.0, mask8 > 0))
    return views


@dataclass
class SceneSample:
    """One figure instance with its rendered views and ground truth."""

    figure: FigureSpec
    views: list  # (Camera, rgb float (H,W,3), mask bool (H,W))
    gt_mesh: Mesh
    center: np.ndarray
    sample_id: str = ""


def generate_sample(
    rng: np.random.Generator,
    index: int,
    n_views: int = 8,
    res: int = 128,
    placement_range=(0.35, 0.0, 0.35),
    fov_deg: float = DEFAULT_FOV_DEG,
    radius_range=DEFAULT_RADIUS_RANGE,
    fixed_elevation: float | None = None,
    gt_res: int = GT_MESH_RES,
) -> SceneSample:
    figure = random_figure(rng, seed=index)
    figure = place_randomly(figure, placement_range, rng)
    poses = sample_views(
        n_views, rng, radius_range=radius_range, fixed_elevation=fixed_elevation
    )
    cams = [pose_to_camera(p, res, fov_deg) for p in poses]
    views = render_scene(figure, cams)
    gt_mesh = extract_gt_mesh(figure, res=gt_res)
    return SceneSample(
        figure=figure,
        views=views,
        gt_mesh=gt_mesh,
        center=mesh_center(gt_mesh.vertices),
        sample_id=f"sample_{index:04d}",
    )


def _split_counts(count: int, ratios) -> list[int]:
    r = np.asarray(ratios, dtype=np.float64)
    if r.sum() <= 0:
        raise ValueError("split ratios must sum to a positive value")
    r = r / r.sum()
    n_train = int(round(r[0] * count))
    n_val = int(round(r[1] * count))
    return [n_train, n_val, count - n_train - n_val]


def save_sample(sample: SceneSample, out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    for k, (cam, rgb, mask) in enumerate(sample.views):
        Image.fromarray(np.round(rgb * 255.0).astype(np.uint8)).save(
            out_dir / f"view_{k}.png"
        )
        Image.fromarray(np.where(mask, 255, 0).astype(np.uint8), mode="L").save(
            out_dir / f"mask_{k}.png"
        )
        save_camera(cam, out_dir / f"cam_{k}.txt")
    # full precision so the stored center is exactly the reloaded mesh's center
    export_mesh(sample.gt_mesh, out_dir / "gt_mesh.obj", precision=17)
    (out_dir / "figure.json").write_text(sample.figure.to_json())
    (out_dir / "center.txt").write_text(
        " ".join(f"{x:.17g}" for x in sample.center) + "\n"
    )


def load_sample(dataset_dir, split: str, sample_id: str) -> SceneSample:
    d = Path(dataset_dir) / split / sample_id
    figure = FigureSpec.from_json((d / "figure.json").read_text())
    views = []
    k = 0
    while (d / f"view_{k}.png").exists():
        cam = load_camera(d / f"cam_{k}.txt")
        rgb = np.asarray(Image.open(d / f"view_{k}.png"), dtype=np.float64) / 255.0
        mask = np.asarray(Image.open(d / f"mask_{k}.png")) > 0
        views.append((cam, rgb, mask))
        k += 1
    center = np.array([float(x) for x in (d / "center.txt").read_text().split()])
    return SceneSample(
        figure=figure,
        views=views,
        gt_mesh=load_mesh(d / "gt_mesh.obj"),
        center=center,
        sample_id=sample_id,
    )


def build_dataset(
    count: int,
    n_views: int,
    res: int,
    split_ratios,
    seed: int,
    out_dir,
    placement_range=(0.35, 0.0, 0.35),
    fov_deg: float = DEFAULT_FOV_DEG,
    radius_range=DEFAULT_RADIUS_RANGE,
    fixed_elevation: float | None = None,
    gt_res: int = GT_MESH_RES,
    threads: int | None = None,
) -> Path:
    """Generate a dataset; returns the manifest path.

    Fully deterministic given ``seed``: each sample draws from its own
    spawned RNG stream, so thread scheduling cannot change outputs.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    n_train, n_val, n_test = _split_counts(count, split_ratios)
    splits = ["train"] * n_train + ["val"] * n_val + ["test"] * n_test

    master = np.random.SeedSequence(seed)
    seqs = master.spawn(count)

    def make(i: int) -> tuple[str, str]:
        sample = generate_sample(
            np.random.default_rng(seqs[i]),
            index=i,
            n_views=n_views,
            res=res,
            placement_range=placement_range,
            fov_deg=fov_deg,
            radius_range=radius_range,
            fixed_elevation=fixed_elevation,
            gt_res=gt_res,
        )
        save_sample(sample, out_dir / splits[i] / sample.sample_id)
        return splits[i], sample.sample_id

    if threads and threads > 1:
        with concurrent.futures.ThreadPoolExecutor(max_workers=threads) as pool:
            rows = list(pool.map(make, range(count)))
    else:
        rows = [make(i) for i in range(count)]

    manifest = out_dir / "manifest.txt"
    manifest.write_text("".join(f"{s} {sid}\n" for s, sid in rows))
    return manifest


def load_manifest(manifest_path) -> dict[str, list[str]]:
    splits: dict[str, list[str]] = {}
    for line in Path(manifest_path).read_text().splitlines():
        if line.strip():
            split, sid = line.split()
            splits.setdefault(split, []).append(sid)
    return splits
