"""Inference: from calibrated views to a world-space triangle mesh.

The figure center is detected per view and triangulated, a canonical frame
is set up around it, the occupancy field is evaluated on a dense lattice in
that frame, marching cubes extracts the surface and the mesh is translated
back into world coordinates.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .cameras import CanonicalFrame, detect_center_2d, triangulate_center
from .meshing import Mesh, marching_cubes
from .pipeline import OccupancyModel, crop_views, predict_occupancy


@dataclass
class OccupancyGrid:
    """Dense occupancy samples over an axis-aligned canonical-frame box."""

    values: np.ndarray  # (R, R, R) in [0, 1]
    lo: np.ndarray
    hi: np.ndarray

    def lattice(self) -> np.ndarray:
        axes = [
            np.linspace(self.lo[a], self.hi[a], self.values.shape[a])
            for a in range(3)
        ]
        x, y, z = np.meshgrid(*axes, indexing="ij")
        return np.stack([x, y, z], axis=-1).reshape(-1, 3)


@dataclass(frozen=True)
class ReconstructionConfig:
    resolution: int = 64
    bound: float = 1.3  # canonical-frame half extent, matches the crop sphere
    threshold: float = 0.5
    chunk: int = 8192
    detector_noise_px: float = 0.0


def evaluate_grid(
    model: OccupancyModel,
    views,
    frame: CanonicalFrame,
    resolution: int,
    bound: float = 1.3,
    chunk: int = 8192,
) -> OccupancyGrid:
    """Occupancy probabilities at every lattice point of a resolution^3 grid.

    ``resolution`` counts lattice points per axis. Deterministic: inference
    aligns local grids with view 0 and involves no sampling.
    """
    lo = np.full(3, -bound)
    hi = np.full(3, bound)
    grid = OccupancyGrid(values=np.empty((resolution,) * 3), lo=lo, hi=hi)
    pts = grid.lattice()
    probs = predict_occupancy(model, views, frame, pts, chunk=chunk)
    grid.values = probs.reshape((resolution,) * 3)
    return grid


def reconstruct_frame(
    model: OccupancyModel, views, frame: CanonicalFrame, config: ReconstructionConfig
) -> Mesh:
    """Canonical-frame mesh from already-cropped views."""
    grid = evaluate_grid(
        model, views, frame, config.resolution, config.bound, config.chunk
    )
    return marching_cubes(grid.values, config.threshold, grid.lo, grid.hi)


@dataclass
class ReconstructionResult:
    mesh_world: Mesh
    center: np.ndarray
    grid: OccupancyGrid

    def __iter__(self):
        # unpacks as (mesh, center) for the common case
        yield self.mesh_world
        yield self.center


def reconstruct_world(
    model: OccupancyModel,
    sample_views,
    config: ReconstructionConfig,
    rng=None,
    center_override: np.ndarray | None = None,
) -> ReconstructionResult:
    """Full pipeline on raw (camera, rgb, mask) views.

    Detects the 2D figure center in every mask, triangulates the 3D center,
    crops the views around it, evaluates the canonical occupancy grid, runs
    marching cubes and places the mesh back in world coordinates.
    ``center_override`` substitutes known detections for diagnostics.
    """
    if center_override is not None:
        center = np.asarray(center_override, dtype=np.float64)
    else:
        detections = [
            (cam, detect_center_2d(mask, config.detector_noise_px, rng))
            for cam, _, mask in sample_views
        ]
        center = triangulate_center(detections)
    frame = CanonicalFrame.from_center(center)
    cropped = crop_views(
        sample_views, center, model.config.crop_radius,
        model.config.encoder.input_resolution,
    )
    grid = evaluate_grid(
        model, cropped, frame, config.resolution, config.bound, config.chunk
    )
    mesh = marching_cubes(grid.values, config.threshold, grid.lo, grid.hi)
    # X_world = X_local - offset
    return ReconstructionResult(
        mesh_world=mesh.translated(-frame.offset), center=center, grid=grid
    )
