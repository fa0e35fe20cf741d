"""Scikit-learn style facade over the full reconstruction pipeline.

``SparseViewReconstructor`` is a standard estimator: hyperparameters in
``__init__`` (so ``get_params`` / ``set_params`` / ``clone`` work), ``fit``
trains on a generated dataset manifest, ``predict`` turns view lists into
world-space meshes.
"""
from __future__ import annotations

from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from .config import RunConfig, SamplerConfig
from .encoder import EncoderConfig
from .fusion import FusionConfig
from .meshing import Mesh
from .pipeline import TrainConfig, load_model, predict_occupancy, train
from .reconstruction import ReconstructionConfig, reconstruct_world
from .validation import check_points, check_views


class SparseViewReconstructor(BaseEstimator):
    """Occupancy-network reconstruction from sparse calibrated views.

    Parameters mirror the run configuration; see the README for the full
    meaning of each. ``fit`` expects the path to a dataset manifest
    produced by ``sparseview gen-data`` (or
    :func:`sparseview.dataset.build_dataset`).
    """

    def __init__(
        self,
        n_views: int = 4,
        fusion_strategy: str = "attention",
        fusion_blocks: int = 2,
        fusion_heads: int = 4,
        d_model: int = 48,
        encoder_stacks: int = 2,
        encoder_depth: int = 2,
        encoder_channels: int = 64,
        input_resolution: int = 128,
        grid_size: float = 0.10,
        grid_pattern: str = "light",
        points_per_figure: int = 512,
        surface_sigma: float = 0.05,
        epochs: int = 100,
        lr: float = 1e-4,
        lr_drop_epochs: tuple = (60, 80),
        figures_per_batch: int = 2,
        reconstruction_resolution: int = 64,
        threshold: float = 0.5,
        seed: int = 0,
    ):
        self.n_views = n_views
        self.fusion_strategy = fusion_strategy
        self.fusion_blocks = fusion_blocks
        self.fusion_heads = fusion_heads
        self.d_model = d_model
        self.encoder_stacks = encoder_stacks
        self.encoder_depth = encoder_depth
        self.encoder_channels = encoder_channels
        self.input_resolution = input_resolution
        self.grid_size = grid_size
        self.grid_pattern = grid_pattern
        self.points_per_figure = points_per_figure
        self.surface_sigma = surface_sigma
        self.epochs = epochs
        self.lr = lr
        self.lr_drop_epochs = lr_drop_epochs
        self.figures_per_batch = figures_per_batch
        self.reconstruction_resolution = reconstruction_resolution
        self.threshold = threshold
        self.seed = seed

    # -- configuration plumbing ----------------------------------------------

    def run_config(self) -> RunConfig:
        return RunConfig(
            encoder=EncoderConfig(
                n_stacks=self.encoder_stacks,
                depth=self.encoder_depth,
                channels=self.encoder_channels,
                input_resolution=self.input_resolution,
            ),
            fusion=FusionConfig(
                n_blocks=self.fusion_blocks,
                n_heads=self.fusion_heads,
                d_model=self.d_model,
                strategy=self.fusion_strategy,
            ),
            sampler=SamplerConfig(
                points_per_figure=self.points_per_figure,
                sigma=self.surface_sigma,
                grid_size=self.grid_size,
                grid_pattern=self.grid_pattern,
            ),
            train=TrainConfig(
                epochs=self.epochs,
                lr=self.lr,
                lr_drop_epochs=tuple(self.lr_drop_epochs),
                figures_per_batch=self.figures_per_batch,
                n_views=self.n_views,
                seed=self.seed,
            ),
            reconstruct=ReconstructionConfig(
                resolution=self.reconstruction_resolution,
                threshold=self.threshold,
            ),
        )

    # -- estimator API ---------------------------------------------------------

    def fit(self, X, y=None, out_dir=None):
        """Train on a dataset manifest path; returns self."""
        manifest = Path(X)
        if not manifest.exists():
            raise FileNotFoundError(f"dataset manifest not found: {manifest}")
        cfg = self.run_config().validate()
        out_dir = Path(out_dir) if out_dir else manifest.parent / "model"
        ckpt = train(manifest, cfg.pipeline_config(), cfg.train_config(), out_dir)
        self.checkpoint_path_ = ckpt
        self.model_ = load_model(cfg.pipeline_config(), ckpt)
        return self

    def load(self, checkpoint_path) -> "SparseViewReconstructor":
        """Attach a previously trained checkpoint instead of fitting."""
        cfg = self.run_config().validate()
        self.model_ = load_model(cfg.pipeline_config(), checkpoint_path)
        self.checkpoint_path_ = Path(checkpoint_path)
        return self

    def _require_fitted(self):
        if not hasattr(self, "model_"):
            raise NotFittedError("call fit() or load() before predicting")

    def predict(self, X) -> list[Mesh]:
        """World-space meshes for one or more view lists.

        ``X``: a list of samples, each a list of (Camera, rgb, mask) views.
        """
        self._require_fitted()
        cfg = self.run_config()
        out = []
        for views in X:
            views = check_views(views, min_views=2)
            result = reconstruct_world(self.model_, views, cfg.reconstruct)
            out.append(result.mesh_world)
        return out

    def predict_occupancy(self, views, points) -> np.ndarray:
        """Occupancy probabilities at world-space points for one sample."""
        self._require_fitted()
        from .cameras import CanonicalFrame, detect_center_2d, triangulate_center
        from .pipeline import crop_views

        views = check_views(views, min_views=2)
        points = check_points(points)
        dets = [(cam, detect_center_2d(mask)) for cam, _, mask in views]
        center = triangulate_center(dets)
        frame = CanonicalFrame.from_center(center)
        cropped = crop_views(
            views, center, self.model_.config.crop_radius, self.input_resolution
        )
        return predict_occupancy(self.model_, cropped, frame, frame.to_local(points))
