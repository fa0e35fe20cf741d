"""End-to-end occupancy prediction and training.

Forward path per query point: encode views, build the local grid, gather
per-view pixel-aligned features + depths for every grid point, fuse views
per grid point, fuse the grid into one context feature, MLP to a logit.
Training supervises every encoder stack (each with its own view-fusion
parameters, shared context fusion and MLP) with binary cross-entropy.
"""
from __future__ import annotations

import csv
import hashlib
import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import ParamStore, Tensor, no_grad, ops, save_checkpoint
from .cameras import Camera, CanonicalFrame, crop_affine, sphere_crop_camera
from .dataset import SceneSample, load_manifest, load_sample, render_scene
from .encoder import Encoder, EncoderConfig, feature_maps_for_views
from .errors import NonFiniteValue
from .figures import occupancy_oracle, place_randomly, translate
from .fusion import ContextFusion, FusionConfig, ViewFusion
from .sampling import gather_view_features, grid_offsets, pick_grid_rotation, sample_points

_N_GRID = {"light": 7, "full": 27, "single": 1}


@dataclass(frozen=True)
class PipelineConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    fusion: FusionConfig = field(default_factory=FusionConfig)
    mlp_widths: tuple = (64, 256, 128, 64, 32, 1)
    grid_size: float = 0.10
    grid_pattern: str = "light"
    crop_radius: float = 1.3
    intermediate_supervision: bool = True
    concat_views: int = 4

    @property
    def n_grid(self) -> int:
        return _N_GRID[self.grid_pattern]

    @property
    def context_width(self) -> int:
        return self.mlp_widths[0]

    def validate(self) -> None:
        self.encoder.validate()
        self.fusion.validate()
        if len(self.mlp_widths) != 6 or self.mlp_widths[-1] != 1:
            raise ValueError("the occupancy MLP uses 6 layers ending in width 1")
        if self.grid_pattern not in _N_GRID:
            raise ValueError(f"unknown grid pattern {self.grid_pattern!r}")
        if self.grid_size <= 0 or self.crop_radius <= 0:
            raise ValueError("grid size and crop radius must be positive")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 100
    lr: float = 1e-4
    lr_drop_epochs: tuple = (60, 80)
    decay: float = 0.99
    epsilon: float = 1e-8
    figures_per_batch: int = 2
    points_per_figure: int = 512
    n_views: int = 4
    sigma: float = 0.05
    seed: int = 0
    place_per_iteration: bool = False
    placement_range: tuple = (1.5, 0.0, 1.5)

    def validate(self) -> None:
        if any(b >= self.epochs for b in self.lr_drop_epochs):
            raise ValueError("learning-rate drops must happen before the last epoch")
        if self.points_per_figure % 2:
            raise ValueError("points per figure must be even")


def config_hash(pipeline_config: PipelineConfig, train_config: TrainConfig | None = None) -> str:
    blob = {"pipeline": asdict(pipeline_config)}
    if train_config is not None:
        blob["train"] = asdict(train_config)
    return hashlib.sha256(json.dumps(blob, sort_keys=True).encode()).hexdigest()[:16]


class _Linear:
    def __init__(self, store, name, fan_in, fan_out, rng):
        lim = np.sqrt(6.0 / (fan_in + fan_out))
        self.w = store.parameter(f"{name}.w", rng.uniform(-lim, lim, size=(fan_in, fan_out)))
        self.b = store.parameter(f"{name}.b", np.zeros(fan_out))

    def __call__(self, x):
        return ops.linear(x, self.w, self.b)


class OccupancyMLP:
    """Six linear layers; the input feature re-enters layers 2-5 by
    concatenation; the last layer emits one logit."""

    def __init__(self, widths, store: ParamStore, rng, prefix: str = "mlp"):
        w_in = widths[0]
        self.layers = [_Linear(store, f"{prefix}.l0", w_in, widths[0], rng)]
        for k in range(1, 5):
            self.layers.append(
                _Linear(store, f"{prefix}.l{k}", widths[k - 1] + w_in, widths[k], rng)
            )
        self.layers.append(_Linear(store, f"{prefix}.l5", widths[4], widths[5], rng))

    def forward(self, x: Tensor) -> Tensor:
        h = ops.relu(self.layers[0](x))
        for layer in self.layers[1:5]:
            h = ops.relu(layer(ops.concat([h, x], axis=1)))
        return self.layers[5](h)


class OccupancyModel:
    """All trainable components over one ParamStore."""

    def __init__(self, config: PipelineConfig, store: ParamStore, seed: int = 0):
        config.validate()
        self.config = config
        self.store = store
        rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(77,)))
        self.encoder = Encoder(config.encoder, store, rng)
        in_dim = config.encoder.channels + 1
        n_fusions = config.encoder.n_stacks if config.intermediate_supervision else 1
        self.fusions = [
            ViewFusion(config.fusion, in_dim, store, rng, prefix=f"fusion{k}",
                       concat_views=config.concat_views)
            for k in range(n_fusions)
        ]
        self.context = ContextFusion(
            config.n_grid, config.fusion.d_model, config.context_width, store, rng
        )
        self.mlp = OccupancyMLP(config.mlp_widths, store, rng)

    def forward_logits(
        self,
        views: list[tuple[Camera, np.ndarray]],
        frame: CanonicalFrame,
        points: np.ndarray,
        train_mode: bool = False,
        rng: np.random.Generator | None = None,
        all_stacks: bool = False,
        record_attention: list | None = None,
    ) -> list[Tensor]:
        """Per-stack logits (N, 1) for canonical-frame query points.

        ``views``: (cropped camera, (4, H, W) float image+mask) pairs.
        ``all_stacks`` returns one logits tensor per supervised stack
        (training); otherwise only the last stack runs.
        """
        cams = [cam for cam, _ in views]
        images = np.stack([img for _, img in views]).astype(self.store.dtype)
        stack_outputs = self.encoder.forward(Tensor(images))

        points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        n = len(points)
        offs = grid_offsets(self.config.grid_size, self.config.grid_pattern)
        r_grid = pick_grid_rotation(cams, rng, train_mode)
        grid_local = points[:, None, :] + (offs @ r_grid.T)[None, :, :]
        world = frame.to_world(grid_local.reshape(-1, 3))

        if all_stacks and self.config.intermediate_supervision:
            selected = list(enumerate(stack_outputs))
        else:
            selected = [(len(self.fusions) - 1, stack_outputs[-1])]

        logits = []
        for stack_idx, out in selected:
            fmaps = feature_maps_for_views(
                out, cams, self.config.encoder.input_resolution
            )
            feats = gather_view_features(world, frame, list(zip(cams, fmaps)))
            fused = self.fusions[stack_idx].forward(
                feats,
                record=record_attention if stack_idx == len(self.fusions) - 1 else None,
            )
            grid_feats = ops.reshape(
                fused, (n, self.config.n_grid, self.config.fusion.d_model)
            )
            logits.append(self.mlp.forward(self.context.forward(grid_feats)))
        return logits


def predict_occupancy(
    model: OccupancyModel,
    views: list[tuple[Camera, np.ndarray]],
    frame: CanonicalFrame,
    points: np.ndarray,
    chunk: int = 4096,
    record_attention: list | None = None,
) -> np.ndarray:
    """Occupancy probabilities in (0, 1) for canonical-frame points."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    out = np.empty(len(points))
    with no_grad():
        for s in range(0, len(points), chunk):
            logits = model.forward_logits(
                views, frame, points[s : s + chunk],
                record_attention=record_attention,
            )[-1]
            out[s : s + chunk] = ops.sigmoid(logits).data.reshape(-1)
    return out


def load_model(pipeline_config: PipelineConfig, checkpoint_path) -> OccupancyModel:
    """Rebuild a model and load checkpoint weights into it."""
    from .autodiff import load_checkpoint

    store = ParamStore(dtype=np.float32)
    model = OccupancyModel(pipeline_config, store, seed=0)
    arrays, _ = load_checkpoint(checkpoint_path)
    store.load_state_arrays(arrays)
    return model


def attention_view_weights(
    model: OccupancyModel,
    views,
    frame: CanonicalFrame,
    points: np.ndarray,
    chunk: int = 8192,
) -> tuple[np.ndarray, np.ndarray]:
    """First-block attention weight per (point, view), plus probabilities.

    The weight of view i at a point is the head- and query-averaged softmax
    mass assigned to view i at the point's own grid cell, i.e. how much the
    fused output draws on that view.
    """
    record: list = []
    probs = predict_occupancy(
        model, views, frame, points, chunk=chunk, record_attention=record
    )
    g = model.config.n_grid
    weights = np.concatenate([a[::g].mean(axis=(1, 2)) for a in record], axis=0)
    return weights, probs


def export_attention_scores(
    model: OccupancyModel,
    views,
    frame: CanonicalFrame,
    points: np.ndarray,
    view_index: int,
    path,
    chunk: int = 8192,
) -> np.ndarray:
    """Write a PLY point cloud whose red intensity is one view's attention.

    ``points`` are canonical-frame positions near the predicted surface;
    the cloud is written in world coordinates. Returns the (N, n_views)
    weight matrix.
    """
    from .meshing import export_colored_points

    weights, _ = attention_view_weights(model, views, frame, points, chunk)
    red = np.clip(np.round(weights[:, view_index] * 255.0), 0, 255)
    colors = np.stack([red, np.full_like(red, 40.0), np.full_like(red, 40.0)], axis=1)
    export_colored_points(frame.to_world(points), colors.astype(np.uint8), path)
    return weights


def surface_band_points(grid_values: np.ndarray, lo, hi, band: float = 0.4,
                        limit: int = 20_000) -> np.ndarray:
    """Lattice points whose occupancy lies within ``band`` of the surface."""
    lo = np.asarray(lo, dtype=np.float64)
    hi = np.asarray(hi, dtype=np.float64)
    res = np.array(grid_values.shape)
    sel = np.abs(grid_values - 0.5) < band
    idx = np.argwhere(sel)
    if len(idx) > limit:
        idx = idx[:: len(idx) // limit + 1]
    return lo + idx * (hi - lo) / (res - 1)


def occupancy_loss(predictions: Tensor, labels: np.ndarray,
                   intermediate_predictions=()) -> Tensor:
    """Mean BCE over points, averaged over supervision terms.

    ``predictions`` and each intermediate are probability tensors; the
    intermediate terms come from re-running fusion + MLP on the other
    encoder stacks and are weighted equally.
    """
    labels = np.asarray(labels, dtype=np.float64).reshape(-1, 1)
    terms = [ops.binary_cross_entropy(predictions, Tensor(labels))]
    for p in intermediate_predictions:
        terms.append(ops.binary_cross_entropy(p, Tensor(labels)))
    total = terms[0]
    for t in terms[1:]:
        total = ops.add(total, t)
    return ops.scale(total, 1.0 / len(terms))


def rmsprop_step(store: ParamStore, state: dict, lr: float,
                 decay: float = 0.99, epsilon: float = 1e-8) -> None:
    """v <- decay v + (1 - decay) g^2 ; p <- p - lr g / (sqrt(v) + eps)."""
    for name, t in store.items():
        v = state.get(name)
        if v is None:
            v = np.zeros_like(t.data)
            state[name] = v
        g = t.grad if t.grad is not None else np.zeros_like(t.data)
        g = g.astype(t.data.dtype, copy=False)
        v *= decay
        v += (1.0 - decay) * g * g
        t.data = t.data - lr * g / (np.sqrt(v) + epsilon)


def lr_at_epoch(base_lr: float, epoch: int, drops=(60, 80)) -> float:
    return base_lr * 0.1 ** sum(1 for b in drops if epoch >= b)


def select_view_indices(n: int, n_stored: int, start: int = 0) -> list[int]:
    """Evenly spread subset of the stored ring of views, rotated by start."""
    if n > n_stored:
        raise ValueError(f"asked for {n} of {n_stored} stored views")
    return [int((start + round(k * n_stored / n)) % n_stored) for k in range(n)]


def crop_views(
    sample_views: list, center: np.ndarray, crop_radius: float, out_res: int
) -> list[tuple[Camera, np.ndarray]]:
    """Crop raw views around a 3D center; returns (camera, (4, R, R)) pairs."""
    out = []
    for cam, rgb, mask in sample_views:
        new_cam = sphere_crop_camera(cam, center, crop_radius, out_res)
        rgb_c = resample_image(rgb, cam, new_cam)
        mask_c = resample_image(mask.astype(np.float64), cam, new_cam)
        img = np.concatenate([rgb_c.transpose(2, 0, 1), mask_c[None]], axis=0)
        out.append((new_cam, img.astype(np.float32)))
    return out


def resample_image(img: np.ndarray, cam_old: Camera, cam_new: Camera) -> np.ndarray:
    """Bilinear resample of an image through a crop camera pair (zero padded)."""
    s, origin = crop_affine(cam_old, cam_new)
    res = cam_new.width
    grid = np.arange(res, dtype=np.float64)
    u = grid / s + origin[0]
    v = grid / s + origin[1]
    uu, vv = np.meshgrid(u, v)
    u0 = np.floor(uu).astype(np.int64)
    v0 = np.floor(vv).astype(np.int64)
    fu = uu - u0
    fv = vv - v0
    h, w = img.shape[:2]
    flat = img.reshape(h * w, -1)
    out = np.zeros((res, res, flat.shape[1]))
    for du, dv, wt in (
        (0, 0, (1 - fu) * (1 - fv)),
        (1, 0, fu * (1 - fv)),
        (0, 1, (1 - fu) * fv),
        (1, 1, fu * fv),
    ):
        cu, cv = u0 + du, v0 + dv
        valid = (cu >= 0) & (cu < w) & (cv >= 0) & (cv < h)
        idx = np.clip(cv, 0, h - 1) * w + np.clip(cu, 0, w - 1)
        out += flat[idx] * (wt * valid)[:, :, None]
    return out if img.ndim == 3 else out[:, :, 0]


@dataclass
class _FigureBatchItem:
    views: list
    frame: CanonicalFrame
    points: np.ndarray
    labels: np.ndarray


def _prepare_figure(
    sample: SceneSample, cfg: PipelineConfig, tcfg: TrainConfig, rng
) -> _FigureBatchItem:
    figure, center, views, gt_mesh = (
        sample.figure, sample.center, sample.views, sample.gt_mesh
    )
    if tcfg.place_per_iteration:
        moved = place_randomly(figure, tcfg.placement_range, rng)
        delta = moved.offset - figure.offset
        cams = [v[0] for v in views]
        views = render_scene(moved, cams)
        sample = SceneSample(
            figure=moved,
            views=views,
            gt_mesh=gt_mesh.translated(delta),
            center=center + delta,
            sample_id=sample.sample_id,
        )
        center = sample.center
    start = int(rng.integers(len(views)))
    idx = select_view_indices(tcfg.n_views, len(views), start)
    subset = [views[i] for i in idx]
    cropped = crop_views(subset, center, cfg.crop_radius,
                         cfg.encoder.input_resolution)
    batch = sample_points(sample, tcfg.points_per_figure, tcfg.sigma, rng)
    return _FigureBatchItem(
        views=cropped,
        frame=CanonicalFrame.from_center(center),
        points=batch.points,
        labels=batch.labels,
    )


def train(
    manifest_path,
    pipeline_config: PipelineConfig,
    train_config: TrainConfig,
    out_dir,
    log_every: int = 0,
) -> Path:
    """Train a model on a generated dataset; returns the checkpoint path.

    Deterministic given the config seed: a single RNG stream drives figure
    order, view selection, point sampling and grid alignment in a fixed
    call sequence. Checkpoints are written at every learning-rate drop and
    at the end; the training log holds one train and one val row per epoch.
    """
    pipeline_config.validate()
    train_config.validate()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    dataset_dir = Path(manifest_path).parent
    splits = load_manifest(manifest_path)
    train_ids = splits["train"]
    val_split = "val" if splits.get("val") else "test"
    val_ids = splits.get(val_split, [])

    cache: dict[str, SceneSample] = {}

    def get_sample(sid: str, split: str) -> SceneSample:
        if sid not in cache:
            cache[sid] = load_sample(dataset_dir, split, sid)
        return cache[sid]

    store = ParamStore(dtype=np.float32)
    model = OccupancyModel(pipeline_config, store, seed=train_config.seed)
    chash = config_hash(pipeline_config, train_config)

    rng = np.random.default_rng(np.random.SeedSequence(train_config.seed))
    val_rng_seed = int(rng.integers(2**63))
    opt_state: dict = {}
    log_rows = []
    t0 = time.monotonic()

    for epoch in range(train_config.epochs):
        lr = lr_at_epoch(train_config.lr, epoch, train_config.lr_drop_epochs)
        order = [train_ids[i] for i in rng.permutation(len(train_ids))]
        epoch_losses = []
        for bstart in range(0, len(order), train_config.figures_per_batch):
            ids = order[bstart : bstart + train_config.figures_per_batch]
            items = [
                _prepare_figure(get_sample(sid, "train"), pipeline_config,
                                train_config, rng)
                for sid in ids
            ]
            store.zero_grad()
            fig_losses = []
            for item in items:
                logits = model.forward_logits(
                    item.views, item.frame, item.points,
                    train_mode=True, rng=rng, all_stacks=True,
                )
                probs = [ops.sigmoid(l) for l in logits]
                fig_losses.append(
                    occupancy_loss(probs[-1], item.labels, probs[:-1])
                )
            total = fig_losses[0]
            for fl in fig_losses[1:]:
                total = ops.add(total, fl)
            total = ops.scale(total, 1.0 / len(fig_losses))
            loss_val = total.item()
            if not np.isfinite(loss_val):
                raise NonFiniteValue(
                    f"non-finite loss at epoch {epoch}, batch {bstart // train_config.figures_per_batch}"
                )
            total.backward()
            rmsprop_step(store, opt_state, lr, train_config.decay, train_config.epsilon)
            epoch_losses.append(loss_val)
            if log_every and (bstart // train_config.figures_per_batch) % log_every == 0:
                print(f"epoch {epoch} batch {bstart} loss {loss_val:.4f}", flush=True)

        train_loss = float(np.mean(epoch_losses))
        val_loss = _validation_loss(
            model, [get_sample(s, val_split) for s in val_ids],
            pipeline_config, train_config, val_rng_seed,
        ) if val_ids else train_loss
        wall = time.monotonic() - t0
        log_rows.append([epoch, "train", f"{train_loss:.6f}", f"{lr:.2e}", f"{wall:.1f}"])
        log_rows.append([epoch, "val", f"{val_loss:.6f}", f"{lr:.2e}", f"{wall:.1f}"])

        if epoch + 1 in train_config.lr_drop_epochs:
            save_checkpoint(
                store, out_dir / f"checkpoint_epoch_{epoch}.bin",
                config_hash=chash, rng_state=_rng_state(rng),
            )

    ckpt = out_dir / "checkpoint.bin"
    save_checkpoint(store, ckpt, config_hash=chash, rng_state=_rng_state(rng))
    with open(out_dir / "train_log.csv", "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["epoch", "split", "loss", "lr", "wall_seconds"])
        writer.writerows(log_rows)
    return ckpt


def _validation_loss(model, samples, cfg, tcfg, seed) -> float:
    losses = []
    with no_grad():
        for k, sample in enumerate(samples):
            rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(k,)))
            idx = select_view_indices(tcfg.n_views, len(sample.views), 0)
            cropped = crop_views(
                [sample.views[i] for i in idx], sample.center,
                cfg.crop_radius, cfg.encoder.input_resolution,
            )
            batch = sample_points(sample, tcfg.points_per_figure, tcfg.sigma, rng)
            frame = CanonicalFrame.from_center(sample.center)
            logits = model.forward_logits(cropped, frame, batch.points)
            loss = occupancy_loss(ops.sigmoid(logits[-1]), batch.labels)
            losses.append(loss.item())
    return float(np.mean(losses))


def _rng_state(rng: np.random.Generator):
    state = rng.bit_generator.state
    return json.loads(json.dumps(state, default=str))
