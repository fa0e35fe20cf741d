"""Command-line entry point.

Subcommands: gen-data, train, reconstruct, evaluate, ablate,
export-attention. All randomness funnels through one master seed; every
subcommand is idempotent on its outputs given identical inputs and seed.
"""
from __future__ import annotations

import argparse
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .config import RunConfig
from .errors import SparseViewError


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, default=None, help="INI config file")
    p.add_argument("--seed", type=int, default=None, help="master seed override")
    p.add_argument("--out", type=Path, required=True, help="output directory")
    p.add_argument("--threads", type=int, default=None,
                   help="worker thread cap (default: machine cores)")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="sparseview",
        description="Sparse-view implicit reconstruction of procedural figures",
    )
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a procedural dataset")
    _common(p)
    p.add_argument("--count", type=int, default=None)
    p.add_argument("--resolution", type=int, default=None, help="render resolution")

    p = sub.add_parser("train", help="train an occupancy model")
    _common(p)
    p.add_argument("--data", type=Path, required=True, help="dataset manifest")
    p.add_argument("--views", type=str, default=None, help="training view count")
    p.add_argument("--fusion", type=str, default=None, help="fusion strategy")
    p.add_argument("--grid-size", type=str, default=None, help="local grid size (m)")
    p.add_argument("--epochs", type=int, default=None)

    p = sub.add_parser("reconstruct", help="reconstruct one sample directory")
    _common(p)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--sample", type=Path, required=True,
                   help="sample directory (<dataset>/<split>/<id>)")
    p.add_argument("--views", type=str, default=None)
    p.add_argument("--resolution", type=int, default=None, help="grid resolution")
    p.add_argument("--threshold", type=float, default=None)
    p.add_argument("--format", choices=("obj", "ply"), default="obj")

    p = sub.add_parser("evaluate", help="evaluate a checkpoint on a split")
    _common(p)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True, help="dataset manifest")
    p.add_argument("--split", default="test")
    p.add_argument("--views", type=str, default=None)
    p.add_argument("--resolution", type=int, default=None)
    p.add_argument("--limit", type=int, default=None, help="cap sample count")

    p = sub.add_parser("ablate", help="train + evaluate over a config grid")
    _common(p)
    p.add_argument("--data", type=Path, required=True, help="dataset manifest")
    p.add_argument("--views", type=str, default="4", help="comma list, e.g. 2,4,6")
    p.add_argument("--fusion", type=str, default="attention",
                   help="comma list of strategies")
    p.add_argument("--grid-size", type=str, default="0.10",
                   help="comma list of grid sizes in meters")
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--resolution", type=int, default=None, help="eval resolution")
    p.add_argument("--limit", type=int, default=None)

    p = sub.add_parser("export-attention", help="attention-score point cloud")
    _common(p)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--sample", type=Path, required=True)
    p.add_argument("--views", type=str, default=None)
    p.add_argument("--view-index", type=int, default=0)
    p.add_argument("--resolution", type=int, default=None)
    return ap


def _load_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    if args.seed is not None:
        cfg = replace(
            cfg,
            dataset=replace(cfg.dataset, seed=args.seed),
            train=replace(cfg.train, seed=args.seed),
        )
    return cfg


def _load_sample_dir(sample_dir: Path):
    from .dataset import load_sample

    sample_dir = sample_dir.resolve()
    return load_sample(sample_dir.parent.parent, sample_dir.parent.name, sample_dir.name)


def _model_from(cfg: RunConfig, checkpoint: Path):
    from .pipeline import load_model

    return load_model(cfg.pipeline_config(), checkpoint)


def cmd_gen_data(args) -> int:
    from .dataset import build_dataset

    cfg = _load_config(args)
    d = cfg.dataset
    if args.count is not None:
        d = replace(d, count=args.count)
    if args.resolution is not None:
        d = replace(d, resolution=args.resolution)
    manifest = build_dataset(
        count=d.count,
        n_views=d.n_views,
        res=d.resolution,
        split_ratios=(d.split_train, d.split_val, d.split_test),
        seed=d.seed,
        out_dir=args.out,
        placement_range=(d.placement_x, 0.0, d.placement_z),
        fov_deg=d.fov_deg,
        radius_range=(d.radius_min, d.radius_max),
        fixed_elevation=None if d.fixed_elevation < 0 else d.fixed_elevation,
        gt_res=d.gt_res,
        threads=args.threads,
    )
    print(f"dataset written: {manifest}")
    return 0


def _apply_train_overrides(cfg: RunConfig, args) -> RunConfig:
    train = cfg.train
    fusion = cfg.fusion
    sampler = cfg.sampler
    if getattr(args, "views", None):
        train = replace(train, n_views=int(args.views))
    if getattr(args, "fusion", None):
        fusion = replace(fusion, strategy=args.fusion)
    if getattr(args, "grid_size", None):
        sampler = replace(sampler, grid_size=float(args.grid_size))
    if getattr(args, "epochs", None):
        drops = tuple(
            max(1, round(b * args.epochs / cfg.train.epochs))
            for b in cfg.train.lr_drop_epochs
        )
        train = replace(train, epochs=args.epochs, lr_drop_epochs=drops)
    return replace(cfg, train=train, fusion=fusion, sampler=sampler)


def cmd_train(args) -> int:
    from .pipeline import train as train_fn

    cfg = _apply_train_overrides(_load_config(args), args).validate()
    ckpt = train_fn(args.data, cfg.pipeline_config(), cfg.train_config(), args.out)
    print(f"checkpoint written: {ckpt}")
    return 0


def cmd_reconstruct(args) -> int:
    from .meshing import export_mesh
    from .pipeline import select_view_indices
    from .reconstruction import reconstruct_world

    cfg = _load_config(args)
    recon = cfg.reconstruct
    if args.resolution:
        recon = replace(recon, resolution=args.resolution)
    if args.threshold is not None:
        recon = replace(recon, threshold=args.threshold)
    n_views = int(args.views) if args.views else cfg.train.n_views
    sample = _load_sample_dir(args.sample)
    model = _model_from(cfg, args.checkpoint)
    views = [sample.views[i] for i in select_view_indices(n_views, len(sample.views), 0)]
    result = reconstruct_world(model, views, recon)
    args.out.mkdir(parents=True, exist_ok=True)
    path = args.out / f"{sample.sample_id}.{args.format}"
    export_mesh(result.mesh_world, path, fmt=args.format)
    print(f"mesh written: {path} "
          f"(V={len(result.mesh_world.vertices)}, F={len(result.mesh_world.triangles)})")
    return 0


def cmd_evaluate(args) -> int:
    from .metrics import evaluate
    from .pipeline import config_hash

    cfg = _load_config(args)
    recon = cfg.reconstruct
    if args.resolution:
        recon = replace(recon, resolution=args.resolution)
    n_views = int(args.views) if args.views else cfg.train.n_views
    model = _model_from(cfg, args.checkpoint)
    report = evaluate(
        model, args.data, args.split, recon, n_views,
        out_dir=args.out, n_surface_samples=cfg.metrics.n_samples,
        config_fingerprint=config_hash(cfg.pipeline_config()),
        limit=args.limit,
    )
    for metric, agg in report.summary()["metrics"].items():
        print(f"{metric}: mean {agg['mean']:.4f} median {agg['median']:.4f}")
    return 0


def cmd_ablate(args) -> int:
    import csv

    from .metrics import METRIC_NAMES, evaluate
    from .pipeline import train as train_fn

    cfg = _load_config(args)
    views_list = [int(v) for v in args.views.split(",")]
    fusion_list = args.fusion.split(",")
    sizes = [float(s) for s in args.grid_size.split(",")]
    args.out.mkdir(parents=True, exist_ok=True)
    rows = []
    for strategy in fusion_list:
        for n_views in views_list:
            for size in sizes:
                run = _apply_train_overrides(cfg, args)
                run = replace(
                    run,
                    fusion=replace(run.fusion, strategy=strategy),
                    train=replace(run.train, n_views=n_views),
                    sampler=replace(run.sampler, grid_size=size),
                ).validate()
                name = f"{strategy}_{n_views}v_S{int(round(size * 100))}cm"
                run_dir = args.out / name
                ckpt = run_dir / "checkpoint.bin"
                if not ckpt.exists():
                    print(f"[{name}] training...", flush=True)
                    train_fn(args.data, run.pipeline_config(), run.train_config(), run_dir)
                model = _model_from(run, ckpt)
                recon = run.reconstruct
                if args.resolution:
                    recon = replace(recon, resolution=args.resolution)
                report = evaluate(
                    model, args.data, "test", recon, n_views,
                    out_dir=run_dir / "eval", limit=args.limit,
                    n_surface_samples=cfg.metrics.n_samples,
                )
                agg = report.summary()["metrics"]
                rows.append(
                    [name] + [f"{agg[m][k]:.4f}" for m in METRIC_NAMES
                              for k in ("mean", "median")]
                )
                print(f"[{name}] " + " ".join(
                    f"{m}={agg[m]['mean']:.4f}" for m in METRIC_NAMES))
    header = ["variant"] + [f"{m}_{k}" for m in METRIC_NAMES for k in ("mean", "median")]
    with open(args.out / "comparison.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(header)
        w.writerows(rows)
    widths = [max(len(r[i]) for r in [header] + rows) for i in range(len(header))]
    for r in [header] + rows:
        print("  ".join(s.ljust(w) for s, w in zip(r, widths)))
    return 0


def cmd_export_attention(args) -> int:
    from .cameras import CanonicalFrame
    from .pipeline import (crop_views, export_attention_scores, select_view_indices,
                           surface_band_points)
    from .reconstruction import evaluate_grid, reconstruct_world

    cfg = _load_config(args)
    recon = cfg.reconstruct
    if args.resolution:
        recon = replace(recon, resolution=args.resolution)
    n_views = int(args.views) if args.views else cfg.train.n_views
    sample = _load_sample_dir(args.sample)
    model = _model_from(cfg, args.checkpoint)
    views = [sample.views[i] for i in select_view_indices(n_views, len(sample.views), 0)]
    result = reconstruct_world(model, views, recon)
    pts = surface_band_points(result.grid.values, result.grid.lo, result.grid.hi)
    frame = CanonicalFrame.from_center(result.center)
    cropped = crop_views(views, result.center, model.config.crop_radius,
                         model.config.encoder.input_resolution)
    args.out.mkdir(parents=True, exist_ok=True)
    path = args.out / f"{sample.sample_id}_attention_view{args.view_index}.ply"
    export_attention_scores(model, cropped, frame, pts, args.view_index, path)
    print(f"attention cloud written: {path} ({len(pts)} points)")
    return 0


_COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "reconstruct": cmd_reconstruct,
    "evaluate": cmd_evaluate,
    "ablate": cmd_ablate,
    "export-attention": cmd_export_attention,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    np.seterr(over="ignore")
    try:
        return _COMMANDS[args.command](args)
    except (SparseViewError, FileNotFoundError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
