"""Surface and occupancy evaluation metrics plus the test-set report.

Chamfer distance is the symmetric mean nearest-neighbor distance between
area-uniform surface samples (centimeters, unsquared). Normal distances
pair each sample with its nearest neighbor on the other mesh and compare
unit face normals. Occupancy L1 compares raw predicted occupancies against
the exact oracle on the same lattice (scaled by 1e3).
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from .cameras import CanonicalFrame
from .dataset import load_manifest, load_sample
from .errors import EmptyMesh, ShapeMismatch
from .figures import occupancy_oracle
from .meshing import Mesh, sample_surface
from .pipeline import OccupancyModel, select_view_indices
from .reconstruction import ReconstructionConfig, reconstruct_world

METRIC_NAMES = ("cd_cm", "occ_l1", "norm_cos", "norm_l2")


def chamfer(mesh_a: Mesh, mesh_b: Mesh, n_samples: int = 10_000, seed: int = 0) -> float:
    """Symmetric Chamfer distance in centimeters."""
    if len(mesh_a.triangles) == 0 or len(mesh_b.triangles) == 0:
        raise EmptyMesh("chamfer distance needs two non-empty meshes")
    rng = np.random.default_rng(seed)
    pa, _ = sample_surface(mesh_a, n_samples, rng)
    pb, _ = sample_surface(mesh_b, n_samples, rng)
    d_ab = cKDTree(pb).query(pa, workers=-1)[0].mean()
    d_ba = cKDTree(pa).query(pb, workers=-1)[0].mean()
    return float(100.0 * 0.5 * (d_ab + d_ba))


def normal_distances(
    mesh_pred: Mesh, mesh_gt: Mesh, n_samples: int = 10_000, seed: int = 0
) -> tuple[float, float]:
    """(cosine distance in [0, 1], L2 distance) between paired unit normals.

    Correspondence by nearest surface sample, symmetrized by averaging the
    two directions.
    """
    if len(mesh_pred.triangles) == 0 or len(mesh_gt.triangles) == 0:
        raise EmptyMesh("normal metrics need two non-empty meshes")
    rng = np.random.default_rng(seed)
    pa, na = sample_surface(mesh_pred, n_samples, rng)
    pb, nb = sample_surface(mesh_gt, n_samples, rng)
    cos_parts, l2_parts = [], []
    for (pts_from, nrm_from, pts_to, nrm_to) in (
        (pa, na, pb, nb),
        (pb, nb, pa, na),
    ):
        idx = cKDTree(pts_to).query(pts_from, workers=-1)[1]
        dots = np.einsum("ij,ij->i", nrm_from, nrm_to[idx])
        cos_parts.append(np.mean(1.0 - dots) / 2.0)
        l2_parts.append(np.linalg.norm(nrm_from - nrm_to[idx], axis=1).mean())
    return float(np.mean(cos_parts)), float(np.mean(l2_parts))


def occ_l1(pred_values: np.ndarray, gt_values: np.ndarray) -> float:
    """Mean absolute occupancy error, scaled by 1e3."""
    pred_values = np.asarray(pred_values)
    gt_values = np.asarray(gt_values)
    if pred_values.shape != gt_values.shape:
        raise ShapeMismatch(
            f"occupancy lattices differ: {pred_values.shape} vs {gt_values.shape}"
        )
    return float(np.abs(pred_values - gt_values).mean() * 1e3)


@dataclass
class EvalReport:
    sample_ids: list
    rows: dict  # metric -> list of per-sample values
    config_fingerprint: str = ""

    def aggregate(self, metric: str) -> dict:
        vals = np.asarray(self.rows[metric], dtype=np.float64)
        return {"mean": float(vals.mean()), "median": float(np.median(vals))}

    def summary(self) -> dict:
        return {
            "n_samples": len(self.sample_ids),
            "config": self.config_fingerprint,
            "metrics": {m: self.aggregate(m) for m in METRIC_NAMES},
        }

    def write(self, out_dir) -> None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        with open(out_dir / "report.csv", "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["sample_id", *METRIC_NAMES])
            for i, sid in enumerate(self.sample_ids):
                w.writerow([sid] + [f"{self.rows[m][i]:.6f}" for m in METRIC_NAMES])
        (out_dir / "summary.json").write_text(json.dumps(self.summary(), indent=1))


def evaluate_sample(
    model: OccupancyModel,
    sample,
    recon: ReconstructionConfig,
    n_views: int,
    n_surface_samples: int = 10_000,
    seed: int = 0,
) -> dict:
    """All four metrics for one scene sample."""
    idx = select_view_indices(n_views, len(sample.views), 0)
    views = [sample.views[i] for i in idx]
    result = reconstruct_world(model, views, recon)
    mesh_world, center, grid = result.mesh_world, result.center, result.grid

    frame = CanonicalFrame.from_center(center)
    gt_at_lattice = occupancy_oracle(
        sample.figure, frame.to_world(grid.lattice())
    ).reshape(grid.values.shape)

    cd = chamfer(mesh_world, sample.gt_mesh, n_surface_samples, seed)
    ncos, nl2 = normal_distances(mesh_world, sample.gt_mesh, n_surface_samples, seed)
    return {
        "cd_cm": cd,
        "occ_l1": occ_l1(grid.values, gt_at_lattice),
        "norm_cos": ncos,
        "norm_l2": nl2,
    }


def evaluate(
    model: OccupancyModel,
    manifest_path,
    split: str,
    recon: ReconstructionConfig,
    n_views: int,
    out_dir=None,
    n_surface_samples: int = 10_000,
    seed: int = 0,
    config_fingerprint: str = "",
    limit: int | None = None,
) -> EvalReport:
    """Reconstruct and score every sample of a dataset split."""
    dataset_dir = Path(manifest_path).parent
    ids = load_manifest(manifest_path)[split]
    if limit is not None:
        ids = ids[:limit]
    rows = {m: [] for m in METRIC_NAMES}
    for sid in ids:
        sample = load_sample(dataset_dir, split, sid)
        metrics = evaluate_sample(
            model, sample, recon, n_views, n_surface_samples, seed
        )
        for m in METRIC_NAMES:
            rows[m].append(metrics[m])
    report = EvalReport(sample_ids=ids, rows=rows, config_fingerprint=config_fingerprint)
    if out_dir is not None:
        report.write(out_dir)
    return report
