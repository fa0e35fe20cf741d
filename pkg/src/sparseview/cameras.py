"""Perspective cameras, canonical frames, intrinsics-aware cropping and
multi-view triangulation of a figure center.

Conventions used throughout the package:

* OpenCV-style camera frame: x right, y down, z forward; a point is in
  front of the camera iff its camera-frame z is positive.
* Pixel centers sit at integer coordinates, so the center of a W-wide
  image is u = (W - 1) / 2. ``uv`` is always ordered (u=column, v=row).
* World units are meters, world up is +y.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import (
    DegenerateGeometry,
    EmptyCrop,
    EmptyMask,
    EmptyMesh,
    PointBehindCamera,
)

_ORTHO_TOL = 1e-9


def _mat3(a) -> np.ndarray:
    m = np.asarray(a, dtype=np.float64).reshape(3, 3)
    m.setflags(write=False)
    return m


def _vec(a, n: int) -> np.ndarray:
    v = np.asarray(a, dtype=np.float64).reshape(n)
    v.setflags(write=False)
    return v


@dataclass(frozen=True)
class Camera:
    """Calibrated pinhole camera: ``x_cam = R @ x_world + t``, ``uv ~ K @ x_cam``.

    ``check_pp`` enforces that the principal point lies inside the image,
    a sanity check for raw capture cameras. Cropped cameras (see
    :func:`crop_and_rescale`) may place the optical axis outside their
    window, so derived cameras skip that check.
    """

    K: np.ndarray
    R: np.ndarray
    t: np.ndarray
    width: int
    height: int
    check_pp: bool = True

    def __post_init__(self):
        object.__setattr__(self, "K", _mat3(self.K))
        object.__setattr__(self, "R", _mat3(self.R))
        object.__setattr__(self, "t", _vec(self.t, 3))
        if not np.allclose(self.R @ self.R.T, np.eye(3), atol=_ORTHO_TOL):
            raise ValueError("camera rotation is not orthonormal")
        if abs(np.linalg.det(self.R) - 1.0) > _ORTHO_TOL:
            raise ValueError("camera rotation must have determinant +1")
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if self.check_pp and not (
            0 <= self.cx < self.width and 0 <= self.cy < self.height
        ):
            raise ValueError("principal point lies outside the image")

    @property
    def fx(self) -> float:
        return float(self.K[0, 0])

    @property
    def fy(self) -> float:
        return float(self.K[1, 1])

    @property
    def cx(self) -> float:
        return float(self.K[0, 2])

    @property
    def cy(self) -> float:
        return float(self.K[1, 2])

    @property
    def center(self) -> np.ndarray:
        """Camera center in world coordinates."""
        return -self.R.T @ self.t

    def projection_matrix(self) -> np.ndarray:
        """3x4 matrix ``K @ [R | t]``."""
        return self.K @ np.hstack([self.R, self.t[:, None]])

    def world_to_cam(self, pts: np.ndarray) -> np.ndarray:
        pts = np.asarray(pts, dtype=np.float64)
        return pts @ self.R.T + self.t

    def project_points(self, pts: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Vectorized projection of an (N, 3) array.

        Returns (uv (N, 2), cam_depth (N,)). Points with non-positive depth
        get non-finite uv; callers must mask on the returned depth.
        """
        pc = self.world_to_cam(pts)
        z = pc[:, 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            u = self.fx * pc[:, 0] / z + self.cx
            v = self.fy * pc[:, 1] / z + self.cy
            uv = np.stack([u, v], axis=1)
        uv[z <= 0] = np.nan
        return uv, z

    def pixel_rays(self) -> np.ndarray:
        """Unit ray directions in world coordinates, shape (H, W, 3)."""
        u, v = np.meshgrid(
            np.arange(self.width, dtype=np.float64),
            np.arange(self.height, dtype=np.float64),
        )
        d_cam = np.stack(
            [(u - self.cx) / self.fx, (v - self.cy) / self.fy, np.ones_like(u)],
            axis=-1,
        )
        d_world = d_cam @ self.R
        return d_world / np.linalg.norm(d_world, axis=-1, keepdims=True)


@dataclass(frozen=True)
class CanonicalFrame:
    """Pure translation into the figure-centered frame: ``x_local = x_world + offset``.

    ``offset`` is the negated figure center so the center maps to the origin.
    The transform has no rotation or scale, so all distances are preserved.
    """

    offset: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "offset", _vec(self.offset, 3))

    @classmethod
    def from_center(cls, center) -> "CanonicalFrame":
        return cls(offset=-np.asarray(center, dtype=np.float64))

    @property
    def center(self) -> np.ndarray:
        """Figure center in world coordinates."""
        return -self.offset

    def to_local(self, pts: np.ndarray) -> np.ndarray:
        return np.asarray(pts, dtype=np.float64) + self.offset

    def to_world(self, pts: np.ndarray) -> np.ndarray:
        return np.asarray(pts, dtype=np.float64) - self.offset


def project(cam: Camera, x_world) -> tuple[np.ndarray, float]:
    """Project one world point; returns (uv, cam_depth).

    Raises PointBehindCamera when the camera-frame depth is not positive.
    """
    x = np.asarray(x_world, dtype=np.float64).reshape(3)
    pc = cam.R @ x + cam.t
    z = float(pc[2])
    if z <= 0:
        raise PointBehindCamera(f"point has camera depth {z:g}")
    uv = np.array([cam.fx * pc[0] / z + cam.cx, cam.fy * pc[1] / z + cam.cy])
    return uv, z


def backproject(cam: Camera, uv, cam_depth: float) -> np.ndarray:
    """Inverse of :func:`project` for a known camera depth."""
    uv = np.asarray(uv, dtype=np.float64).reshape(2)
    pc = np.array(
        [
            (uv[0] - cam.cx) / cam.fx * cam_depth,
            (uv[1] - cam.cy) / cam.fy * cam_depth,
            cam_depth,
        ]
    )
    return cam.R.T @ (pc - cam.t)


def canonical_depth(frame: CanonicalFrame, cam: Camera, x_world) -> float:
    """z-component of ``R_cam @ (x_world + offset)``.

    Only the camera rotation enters: this is the depth coordinate of the
    canonical-frame point in a frame axis-aligned with the camera, not the
    raw camera depth.
    """
    x = np.asarray(x_world, dtype=np.float64).reshape(3)
    return float(cam.R[2] @ (x + frame.offset))


def canonical_depths(frame: CanonicalFrame, cam: Camera, pts: np.ndarray) -> np.ndarray:
    """Vectorized :func:`canonical_depth` for an (N, 3) array."""
    pts = np.asarray(pts, dtype=np.float64)
    return (pts + frame.offset) @ cam.R[2]


def crop_and_rescale(cam: Camera, center_2d, crop_size_px: float, out_res: int) -> Camera:
    """Camera for a square crop of side ``crop_size_px`` centered at ``center_2d``,
    resampled to ``out_res`` x ``out_res`` pixels.

    The returned intrinsics satisfy: projecting any world point through the
    new camera lands at the same image content as the old projection mapped
    by ``uv_new = (uv_old - origin) * out_res / crop_size_px``.
    """
    center_2d = np.asarray(center_2d, dtype=np.float64).reshape(2)
    if crop_size_px <= 0:
        raise ValueError("crop size must be positive")
    origin = center_2d - crop_size_px / 2.0
    if (
        origin[0] + crop_size_px <= 0
        or origin[1] + crop_size_px <= 0
        or origin[0] >= cam.width
        or origin[1] >= cam.height
    ):
        raise EmptyCrop("crop window does not intersect the image")
    s = out_res / crop_size_px
    K = np.array(
        [
            [cam.fx * s, 0.0, (cam.cx - origin[0]) * s],
            [0.0, cam.fy * s, (cam.cy - origin[1]) * s],
            [0.0, 0.0, 1.0],
        ]
    )
    return Camera(K=K, R=cam.R, t=cam.t, width=out_res, height=out_res, check_pp=False)


def crop_affine(cam_old: Camera, cam_new: Camera) -> tuple[float, np.ndarray]:
    """Recover (scale, origin) of the pixel map ``uv_new = (uv_old - origin) * scale``
    between a camera and its cropped/rescaled version."""
    s = cam_new.fx / cam_old.fx
    origin = np.array([cam_old.cx - cam_new.cx / s, cam_old.cy - cam_new.cy / s])
    return s, origin


def sphere_crop_camera(cam: Camera, center_world, radius: float, out_res: int) -> Camera:
    """Crop camera for the tight square around the image of a world sphere.

    The silhouette of the sphere seen from the camera center is a circle on
    the sphere; its projection bounds are found by projecting a dense sample
    of that circle.
    """
    c = cam.world_to_cam(np.asarray(center_world, dtype=np.float64)[None, :])[0]
    d = np.linalg.norm(c)
    if d <= radius:
        raise ValueError("camera center lies inside the crop sphere")
    # Silhouette circle: center shifted toward the camera, shrunk radius.
    k = 1.0 - (radius / d) ** 2
    circ_center = c * k
    circ_radius = radius * np.sqrt(k)
    axis = c / d
    # Orthonormal basis of the plane orthogonal to the viewing axis.
    ref = np.array([1.0, 0.0, 0.0]) if abs(axis[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    e1 = np.cross(axis, ref)
    e1 /= np.linalg.norm(e1)
    e2 = np.cross(axis, e1)
    ang = np.linspace(0.0, 2.0 * np.pi, 256, endpoint=False)
    pts_cam = (
        circ_center[None, :]
        + circ_radius * (np.cos(ang)[:, None] * e1 + np.sin(ang)[:, None] * e2)
    )
    z = pts_cam[:, 2]
    if np.any(z <= 0):
        raise PointBehindCamera("crop sphere extends behind the camera")
    u = cam.fx * pts_cam[:, 0] / z + cam.cx
    v = cam.fy * pts_cam[:, 1] / z + cam.cy
    center_2d = np.array([(u.min() + u.max()) / 2.0, (v.min() + v.max()) / 2.0])
    size = max(u.max() - u.min(), v.max() - v.min()) * 1.02
    return crop_and_rescale(cam, center_2d, size, out_res)


def triangulate_center(detections) -> np.ndarray:
    """Least-squares 3D point from per-view 2D detections.

    Direct linear transform on normalized image coordinates, followed by one
    Gauss-Newton step on the pixel reprojection error. Input rows are
    assembled in a canonical sorted order so the result is invariant to the
    order of the views.

    ``detections``: sequence of (Camera, uv) pairs, length >= 2.
    """
    if len(detections) < 2:
        raise ValueError("triangulation needs at least two views")
    keys = np.array(
        [
            np.concatenate(
                [cam.K.ravel(), cam.R.ravel(), cam.t, np.asarray(uv, dtype=np.float64)]
            )
            for cam, uv in detections
        ]
    )
    order = np.lexsort(keys.T[::-1])
    detections = [detections[i] for i in order]

    rows = []
    for cam, uv in detections:
        uv = np.asarray(uv, dtype=np.float64).reshape(2)
        xn = (uv[0] - cam.cx) / cam.fx
        yn = (uv[1] - cam.cy) / cam.fy
        P = np.hstack([cam.R, cam.t[:, None]])
        rows.append(xn * P[2] - P[0])
        rows.append(yn * P[2] - P[1])
    A = np.array(rows)
    _, s, vt = np.linalg.svd(A)
    # Consistent data makes the smallest singular value ~0 by construction;
    # degeneracy (collinear rays) shows up one dimension earlier.
    if s[2] <= s[0] / 1e12:
        raise DegenerateGeometry("triangulation design matrix is rank-deficient")
    xh = vt[-1]
    if abs(xh[3]) < 1e-15:
        raise DegenerateGeometry("triangulated point at infinity")
    x = xh[:3] / xh[3]

    # One Gauss-Newton step on pixel reprojection error.
    r = np.empty(2 * len(detections))
    J = np.empty((2 * len(detections), 3))
    for i, (cam, uv) in enumerate(detections):
        uv = np.asarray(uv, dtype=np.float64).reshape(2)
        pc = cam.R @ x + cam.t
        z = pc[2]
        if z <= 0:
            continue  # leave zero rows: the view cannot constrain this step
        r[2 * i] = cam.fx * pc[0] / z + cam.cx - uv[0]
        r[2 * i + 1] = cam.fy * pc[1] / z + cam.cy - uv[1]
        J[2 * i] = cam.fx * (cam.R[0] * z - pc[0] * cam.R[2]) / z**2
        J[2 * i + 1] = cam.fy * (cam.R[1] * z - pc[1] * cam.R[2]) / z**2
    JtJ = J.T @ J
    if np.linalg.cond(JtJ) < 1e12:
        x = x - np.linalg.solve(JtJ, J.T @ r)
    return x


def mesh_center(vertices) -> np.ndarray:
    """Figure center of a vertex set: median x, mid-range y, median z.

    The vertical coordinate uses the midpoint of the extremes rather than the
    median so the result does not depend on how vertices cluster along the
    height of the figure.
    """
    v = np.asarray(vertices, dtype=np.float64)
    if v.size == 0:
        raise EmptyMesh("cannot take the center of an empty vertex set")
    v = v.reshape(-1, 3)
    return np.array(
        [
            np.median(v[:, 0]),
            (v[:, 1].min() + v[:, 1].max()) / 2.0,
            np.median(v[:, 2]),
        ]
    )


def detect_center_2d(mask: np.ndarray, noise_sigma: float = 0.0, rng=None) -> np.ndarray:
    """Center of the foreground bounding box of a binary mask, as (u, v).

    ``noise_sigma`` adds zero-mean isotropic Gaussian pixel noise, emulating
    the error of a learned detector for robustness studies.
    """
    mask = np.asarray(mask)
    fg = mask > 0
    if not fg.any():
        raise EmptyMask("mask has no foreground pixels")
    rows = np.flatnonzero(fg.any(axis=1))
    cols = np.flatnonzero(fg.any(axis=0))
    center = np.array(
        [(cols[0] + cols[-1]) / 2.0, (rows[0] + rows[-1]) / 2.0]
    )
    if noise_sigma > 0:
        if rng is None:
            rng = np.random.default_rng()
        center = center + rng.normal(0.0, noise_sigma, size=2)
    return center


_CAM_KEYS = ("K", "R", "t", "width", "height")


def save_camera(cam: Camera, path) -> None:
    """Write a camera as a small text file (K/R/t row-major, width, height)."""
    lines = [
        "K " + " ".join(f"{x:.17g}" for x in cam.K.ravel()),
        "R " + " ".join(f"{x:.17g}" for x in cam.R.ravel()),
        "t " + " ".join(f"{x:.17g}" for x in cam.t),
        f"width {cam.width}",
        f"height {cam.height}",
    ]
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")


def load_camera(path) -> Camera:
    fields = {}
    with open(path) as f:
        for line in f:
            parts = line.split()
            if parts:
                fields[parts[0]] = parts[1:]
    missing = [k for k in _CAM_KEYS if k not in fields]
    if missing:
        raise ValueError(f"camera file {path} is missing fields: {missing}")
    return Camera(
        K=np.array([float(x) for x in fields["K"]]).reshape(3, 3),
        R=np.array([float(x) for x in fields["R"]]).reshape(3, 3),
        t=np.array([float(x) for x in fields["t"]]),
        width=int(fields["width"][0]),
        height=int(fields["height"][0]),
    )
