"""Input validation helpers shared by the estimator and the CLI."""
from __future__ import annotations

import numpy as np

from .cameras import Camera
from .errors import EmptyMask, EmptyMesh, NonFiniteValue, ShapeMismatch
from .meshing import Mesh


def check_points(pts, name: str = "points") -> np.ndarray:
    """Coerce to a finite (N, 3) float64 array."""
    arr = np.asarray(pts, dtype=np.float64)
    if arr.ndim == 1 and arr.size == 3:
        arr = arr[None, :]
    if arr.ndim != 2 or arr.shape[1] != 3:
        raise ShapeMismatch(f"{name} must be (N, 3), got {arr.shape}")
    if not np.isfinite(arr).all():
        raise NonFiniteValue(f"{name} holds NaN or Inf")
    return arr


def check_mask(mask) -> np.ndarray:
    arr = np.asarray(mask)
    if arr.ndim != 2:
        raise ShapeMismatch(f"mask must be 2D, got shape {arr.shape}")
    fg = arr > 0
    if not fg.any():
        raise EmptyMask("mask has no foreground pixels")
    return fg


def check_mesh(mesh: Mesh) -> Mesh:
    if not isinstance(mesh, Mesh):
        raise TypeError("expected a Mesh")
    if len(mesh.triangles) == 0:
        raise EmptyMesh("mesh has no triangles")
    if not np.isfinite(mesh.vertices).all():
        raise NonFiniteValue("mesh vertices hold NaN or Inf")
    return mesh


def check_views(views, min_views: int = 1):
    """Validate a list of (Camera, rgb, mask) triples with matching sizes."""
    if len(views) < min_views:
        raise ValueError(f"need at least {min_views} views, got {len(views)}")
    out = []
    for i, item in enumerate(views):
        if len(item) != 3:
            raise TypeError(f"view {i} must be (Camera, rgb, mask)")
        cam, rgb, mask = item
        if not isinstance(cam, Camera):
            raise TypeError(f"view {i}: first element must be a Camera")
        rgb = np.asarray(rgb, dtype=np.float64)
        if rgb.ndim != 3 or rgb.shape[2] != 3:
            raise ShapeMismatch(f"view {i}: rgb must be (H, W, 3)")
        if rgb.shape[:2] != (cam.height, cam.width):
            raise ShapeMismatch(
                f"view {i}: image {rgb.shape[:2]} does not match camera "
                f"({cam.height}, {cam.width})"
            )
        fg = check_mask(mask)
        if fg.shape != rgb.shape[:2]:
            raise ShapeMismatch(f"view {i}: mask and image sizes differ")
        out.append((cam, rgb, fg))
    return out
