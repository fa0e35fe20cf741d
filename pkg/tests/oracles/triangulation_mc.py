"""Monte-Carlo oracle for the noisy-triangulation tolerance.

Runs an independent nonlinear solver (scipy least_squares on the pixel
reprojection residuals) over many random trials of the reference setup:
4 cameras at ~2.5 m looking at the origin, 512x512 images, exact detections
perturbed by 1-px isotropic Gaussian noise. The resulting median 3D error
fixes the threshold asserted by the acceptance suite (frozen there with a
1.25x margin).

Run directly to print the statistics:

    python3 -m tests.oracles.triangulation_mc
"""
from __future__ import annotations

import numpy as np
from scipy.optimize import least_squares

from sparseview.cameras import Camera

IMAGE_RES = 512
FOV_DEG = 60.0
RADIUS = 2.5
N_VIEWS = 4
NOISE_PX = 1.0


def reference_cameras() -> list[Camera]:
    f = (IMAGE_RES / 2.0) / np.tan(np.radians(FOV_DEG) / 2.0)
    c = (IMAGE_RES - 1) / 2.0
    K = np.array([[f, 0, c], [0, f, c], [0, 0, 1.0]])
    cams = []
    for k in range(N_VIEWS):
        az = np.radians(90.0 * k)
        el = np.radians(10.0)
        pos = RADIUS * np.array(
            [np.sin(az) * np.cos(el), np.sin(el), np.cos(az) * np.cos(el)]
        )
        fwd = -pos / np.linalg.norm(pos)
        up = np.array([0.0, 1.0, 0.0])
        x = np.cross(fwd, -up)
        x /= np.linalg.norm(x)
        y = np.cross(fwd, x)
        R = np.stack([x, y, fwd])
        cams.append(Camera(K=K, R=R, t=-R @ pos, width=IMAGE_RES, height=IMAGE_RES))
    return cams


def project_exact(cam: Camera, p: np.ndarray) -> np.ndarray:
    pc = cam.R @ p + cam.t
    return np.array(
        [cam.fx * pc[0] / pc[2] + cam.cx, cam.fy * pc[1] / pc[2] + cam.cy]
    )


def solve_reference(cams, detections, x0) -> np.ndarray:
    """Independent nonlinear solve of the reprojection problem."""

    def residuals(x):
        r = []
        for cam, uv in zip(cams, detections):
            r.extend(project_exact(cam, x) - uv)
        return np.array(r)

    return least_squares(residuals, x0, method="lm").x


def run(n_trials: int = 10_000, seed: int = 20240601) -> dict:
    rng = np.random.default_rng(seed)
    cams = reference_cameras()
    errors = np.empty(n_trials)
    for i in range(n_trials):
        p = rng.uniform(-0.3, 0.3, size=3)
        dets = [
            project_exact(cam, p) + rng.normal(0.0, NOISE_PX, size=2) for cam in cams
        ]
        x = solve_reference(cams, dets, x0=np.zeros(3))
        errors[i] = np.linalg.norm(x - p)
    return {
        "trials": n_trials,
        "median_m": float(np.median(errors)),
        "mean_m": float(np.mean(errors)),
        "p95_m": float(np.quantile(errors, 0.95)),
    }


if __name__ == "__main__":
    stats = run()
    for k, v in stats.items():
        print(f"{k}: {v}")
    print(f"suggested threshold (1.25 * median): {1.25 * stats['median_m']:.6f} m")
