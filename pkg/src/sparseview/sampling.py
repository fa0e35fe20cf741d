"""Training-point sampling and local 3D grid construction.

Each query point carries a small grid of neighbors (the 7 axis cells of a
3-per-axis pattern by default, or the full 27) whose per-view features give
the network local 3D context. Grid orientation follows one of the cameras:
a random one per training iteration, view 0 at inference.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, ops
from .cameras import Camera, CanonicalFrame, canonical_depths
from .dataset import SceneSample
from .encoder import FeatureMap, query_feature
from .figures import occupancy_oracle

GRID_PATTERNS = ("light", "full", "single")


@dataclass
class SampleBatch:
    """Query points in the canonical frame with exact occupancy labels."""

    points: np.ndarray
    labels: np.ndarray


@dataclass
class LocalGrid:
    center: np.ndarray
    size: float
    rotation: np.ndarray
    offsets: np.ndarray  # (G, 3), center row first

    @property
    def n_points(self) -> int:
        return len(self.offsets)

    def world_points(self) -> np.ndarray:
        return self.center + self.offsets @ self.rotation.T


def grid_offsets(size: float, pattern: str = "light") -> np.ndarray:
    """Grid-point offsets in the grid's own axes, center first.

    ``light``: the 7 cells along the three axes through the center of a
    3-cells-per-axis grid. ``full``: all 27 cells (remaining 26 in
    lexicographic order). ``single``: just the center (context off).
    """
    h = size / 2.0
    if pattern == "light":
        return np.array(
            [
                [0.0, 0.0, 0.0],
                [h, 0.0, 0.0], [-h, 0.0, 0.0],
                [0.0, h, 0.0], [0.0, -h, 0.0],
                [0.0, 0.0, h], [0.0, 0.0, -h],
            ]
        )
    if pattern == "full":
        rest = [
            [i * h, j * h, k * h]
            for i in (-1, 0, 1)
            for j in (-1, 0, 1)
            for k in (-1, 0, 1)
            if (i, j, k) != (0, 0, 0)
        ]
        return np.vstack([[0.0, 0.0, 0.0], rest])
    if pattern == "single":
        return np.zeros((1, 3))
    raise ValueError(f"unknown grid pattern {pattern!r}")


def build_local_grid(
    center,
    size: float,
    views: list[Camera],
    rng: np.random.Generator | None,
    train_mode: bool,
    pattern: str = "light",
) -> LocalGrid:
    """Local grid around one point, axes aligned with one camera.

    Training picks the camera uniformly at random; inference pins view 0 so
    results are deterministic. The grid's third axis equals that camera's
    optical axis (third row of its rotation).
    """
    if size <= 0:
        raise ValueError("grid size must be positive")
    if not views:
        raise ValueError("need at least one view")
    R = pick_grid_rotation(views, rng, train_mode)
    return LocalGrid(
        center=np.asarray(center, dtype=np.float64),
        size=size,
        rotation=R,
        offsets=grid_offsets(size, pattern),
    )


def pick_grid_rotation(views: list[Camera], rng, train_mode: bool) -> np.ndarray:
    idx = int(rng.integers(len(views))) if train_mode else 0
    return views[idx].R.T.copy()


def sample_points(
    sample: SceneSample, n: int, sigma: float, rng: np.random.Generator
) -> SampleBatch:
    """Draw ``n`` labeled query points for one scene.

    Half are uniform in the figure's bounding box inflated by 10%; half are
    near-surface (area-uniform mesh samples perturbed by Gaussian sigma),
    rejection-balanced so a quarter of all points land inside and a quarter
    outside. Points are returned in the canonical frame.
    """
    if n % 2:
        raise ValueError("point count must be even")
    from .meshing import sample_surface

    lo, hi = sample.figure.aabb()
    span = hi - lo
    lo_i = lo - 0.05 * span
    hi_i = hi + 0.05 * span
    n_uniform = n // 2
    uniform = rng.uniform(lo_i, hi_i, size=(n_uniform, 3))

    n_in = n // 4
    n_out = n // 2 - n_in
    inside_pts, outside_pts = [], []
    got_in = got_out = 0
    while got_in < n_in or got_out < n_out:
        batch = max(n, 256)
        surf, _ = sample_surface(sample.gt_mesh, batch, rng)
        pts = surf + rng.normal(0.0, sigma, size=surf.shape)
        occ = occupancy_oracle(sample.figure, pts) > 0.5
        if got_in < n_in:
            take = pts[occ][: n_in - got_in]
            inside_pts.append(take)
            got_in += len(take)
        if got_out < n_out:
            take = pts[~occ][: n_out - got_out]
            outside_pts.append(take)
            got_out += len(take)
    near = np.vstack(inside_pts + outside_pts)

    world = np.vstack([uniform, near])
    labels = occupancy_oracle(sample.figure, world)
    frame = CanonicalFrame.from_center(sample.center)
    return SampleBatch(points=frame.to_local(world), labels=labels)


def gather_view_features(
    grid_points_world: np.ndarray,
    frame: CanonicalFrame,
    views: list[tuple[Camera, FeatureMap]],
) -> Tensor:
    """Per-view pixel-aligned features for a flat list of world points.

    For each view the point projects into the cropped camera, the feature
    map is sampled bilinearly, and the view-aligned canonical depth is
    appended. Points behind a camera keep their true depth but contribute
    a zero feature. Returns (N, n_views, C + 1).
    """
    per_view = []
    n = len(grid_points_world)
    for cam, fmap in views:
        uv, cam_depth = cam.project_points(grid_points_world)
        depth = canonical_depths(frame, cam, grid_points_world)
        feat = query_feature(fmap, uv)  # non-finite uv sample to zero
        col = ops.concat(
            [feat, Tensor(depth.reshape(n, 1).astype(feat.data.dtype))], axis=1
        )
        per_view.append(ops.reshape(col, (n, 1, col.data.shape[1])))
    return ops.concat(per_view, axis=1)
