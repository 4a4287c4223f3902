"""Command-line surface: dataset synthesis, training, generation, rendering,
evaluation, and the query-count scaling experiment.

Exit codes: 0 success, 1 runtime failure, 2 usage error. The output directory
comes from --out, else $SPARSEGEN_RUN_DIR, else ./runs/<command>; every
artifact a command produces lands under it.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from pathlib import Path

import numpy as np
import torch

from .data import load_dataset, make_synthetic_dataset
from .gaussians import load_scene, save_scene
from .geometry import CameraPose
from .infer import generate, render_novel
from .metrics import (input_view_bias, plot_opacity_histogram,
                      plot_query_projections, plot_scaling, psnr, utilization)
from .splatter import read_png, write_png
from .trainer import TrainConfig, Trainer, load_checkpoint

SCALING_QUERY_COUNTS = (64, 128, 256)


class UsageError(Exception):
    """Bad flags or config contents; mapped to exit code 2."""


def _out_dir(args, command: str) -> Path:
    out = args.out or os.environ.get("SPARSEGEN_RUN_DIR") or f"runs/{command}"
    path = Path(out)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _config_fields() -> set:
    return {f.name for f in dataclasses.fields(TrainConfig)}


def _merged_config(args, **extra) -> TrainConfig:
    """JSON config file merged with CLI overrides; CLI wins."""
    data: dict = {}
    if getattr(args, "config", None):
        cfg_path = Path(args.config)
        if not cfg_path.is_file():
            raise UsageError(f"config file not found: {cfg_path}")
        with open(cfg_path) as fh:
            try:
                raw = json.load(fh)
            except json.JSONDecodeError as e:
                raise UsageError(f"config is not valid JSON: {e}") from e
        if not isinstance(raw, dict):
            raise UsageError("config must be a JSON object")
        unknown = set(raw) - _config_fields()
        if unknown:
            raise UsageError(f"unknown config keys: {sorted(unknown)}")
        data.update(raw)
    if getattr(args, "seed", None) is not None:
        data["seed"] = args.seed
    if getattr(args, "queries", None) is not None:
        data["m"] = args.queries
    if getattr(args, "resolution", None) is not None:
        data["resolution"] = args.resolution
    if getattr(args, "views", None) is not None:
        data["v"] = args.views
    if getattr(args, "data", None) is not None:
        data["dataset"] = str(args.data)
    if getattr(args, "iters", None) is not None:
        data["n_iter"] = args.iters
    data.update(extra)
    try:
        if getattr(args, "desk", False):
            return TrainConfig.desk(**data)
        return TrainConfig(**data)
    except (TypeError, ValueError) as e:
        raise UsageError(f"invalid config: {e}") from e


# ----------------------------------------------------------------- commands

def cmd_make_data(args) -> int:
    out = _out_dir(args, "make-data")
    root = make_synthetic_dataset(out, n_scenes=args.scenes,
                                  gaussians_per_scene=args.gaussians,
                                  n_views=args.views, resolution=args.resolution,
                                  seed=args.seed)
    print(f"wrote {args.scenes} scenes x {args.views} views "
          f"({args.resolution}x{args.resolution}) to {root}")
    return 0


def cmd_train(args) -> int:
    out = _out_dir(args, "train")
    cfg = _merged_config(args)
    if not cfg.dataset:
        raise UsageError("train needs a dataset (--data or config.dataset)")
    ds = load_dataset(cfg.dataset)
    if ds.errors:
        for err in ds.errors:
            print(f"skipping scene {err.scene_id or err.path}: {err.message}",
                  file=sys.stderr)
    trainer = Trainer(cfg, ds, run_dir=out)
    ckpt = trainer.fit()
    print(f"trained {trainer.step} steps; checkpoint at {ckpt}")
    return 0


def _conditioning_from_dataset(args, resolution_hint=None):
    ds = load_dataset(args.data)
    if not ds.records:
        raise FileNotFoundError(f"no valid scenes in {args.data}")
    rec = ds.records[0]
    if getattr(args, "scene", None):
        matches = [r for r in ds.records if r.scene_id == args.scene]
        if not matches:
            raise FileNotFoundError(f"scene {args.scene!r} not in {args.data}")
        rec = matches[0]
    n = args.views if args.views is not None else 1
    if n > rec.n_views:
        raise UsageError(f"scene has {rec.n_views} views, asked for {n}")
    images = rec.load_images()
    return rec, images[:n], rec.poses[:n], rec.poses


def cmd_generate(args) -> int:
    out = _out_dir(args, "generate")
    trainer = load_checkpoint(args.checkpoint)
    if args.data:
        rec, cond_images, cond_poses, target_poses = \
            _conditioning_from_dataset(args)
        n_cond = cond_images.shape[0]
    else:
        cond_images = cond_poses = None
        target_poses = None
        n_cond = 0
    result = generate(trainer, cond_images, cond_poses, target_poses,
                      seed=args.seed)
    save_scene(out / "scene.sggs", result.gaussians)
    poses = target_poses if target_poses is not None else result.input_poses
    with open(out / "poses.json", "w") as fh:
        json.dump([p.to_json_dict() for p in poses], fh, indent=1)
    for i in range(result.renders.shape[0]):
        write_png(out / f"render_{i:03d}.png", result.renders[i])
    with open(out / "summary.json", "w") as fh:
        json.dump({"checkpoint": str(args.checkpoint), "seed": args.seed,
                   "conditioning_views": n_cond,
                   "n_gaussians": len(result.gaussians),
                   "n_renders": int(result.renders.shape[0])}, fh, indent=1)
    print(f"generated {len(result.gaussians)} Gaussians from {n_cond} "
          f"conditioning view(s); artifacts in {out}")
    return 0


def cmd_render(args) -> int:
    out = _out_dir(args, "render")
    gs = load_scene(args.gaussians)
    with open(args.poses) as fh:
        poses = [CameraPose.from_json_dict(d) for d in json.load(fh)]
    res = args.resolution or 128
    images = render_novel(gs, poses, res, res)
    for i in range(images.shape[0]):
        write_png(out / f"render_{i:03d}.png", images[i])
    print(f"rendered {len(poses)} view(s) of {len(gs)} Gaussians to {out}")
    return 0


def _eval_scene_renders(rec, renders_root: Path) -> torch.Tensor:
    scene_dir = renders_root / rec.scene_id
    paths = sorted(scene_dir.glob("view_*.png"))
    if len(paths) != rec.n_views:
        raise FileNotFoundError(
            f"{scene_dir} holds {len(paths)} renders for {rec.n_views} views")
    return torch.stack([read_png(p) for p in paths])


def cmd_eval(args) -> int:
    out = _out_dir(args, "eval")
    if (args.checkpoint is None) == (args.renders is None):
        raise UsageError("eval needs exactly one of --checkpoint / --renders")
    ds = load_dataset(args.data)
    if not ds.records:
        raise FileNotFoundError(f"no valid scenes in {args.data}")
    n_cond = args.views if args.views is not None else 1
    trainer = load_checkpoint(args.checkpoint) if args.checkpoint else None

    per_scene = []
    first_util = None
    for rec in ds.records:
        targets = rec.load_images()
        if n_cond >= rec.n_views:
            raise UsageError(f"scene {rec.scene_id} has {rec.n_views} views; "
                             f"--views {n_cond} leaves nothing novel")
        if trainer is not None:
            result = generate(trainer, targets[:n_cond], rec.poses[:n_cond],
                              rec.poses, seed=args.seed)
            renders = result.renders
            if first_util is None:
                first_util = utilization(result.gaussians, pose=rec.poses[0])
        else:
            renders = _eval_scene_renders(rec, Path(args.renders))
        report = input_view_bias(renders, targets, list(range(n_cond)))
        per_scene.append({"scene_id": rec.scene_id, **report.as_dict()})

    def finite_mean(key):
        vals = [s[key] for s in per_scene if np.isfinite(s[key])]
        return float(np.mean(vals)) if vals else float("inf")

    summary = {k: finite_mean(k) for k in
               ("psnr_cond", "psnr_novel", "delta_psnr", "ssim_cond",
                "ssim_novel", "delta_ssim", "perc_cond", "perc_novel",
                "delta_perc")}
    payload = {"n_scenes": len(per_scene), "conditioning_views": n_cond,
               "seed": args.seed, "mean": summary, "scenes": per_scene}
    with open(out / "report.json", "w") as fh:
        json.dump(payload, fh, indent=1)
    if first_util is not None:
        with open(out / "utilization.json", "w") as fh:
            json.dump(first_util.as_dict(), fh, indent=1)
        plot_opacity_histogram(first_util, out / "opacity_histogram.png")
        plot_query_projections(first_util, out / "query_projections.png")
    print(f"eval over {len(per_scene)} scenes: "
          f"PSNR cond {summary['psnr_cond']:.2f} novel {summary['psnr_novel']:.2f} "
          f"(delta {summary['delta_psnr']:.2f}); "
          f"SSIM delta {summary['delta_ssim']:.4f}; report in {out}")
    return 0


def cmd_scaling(args) -> int:
    out = _out_dir(args, "scaling")
    if not args.data:
        raise UsageError("scaling needs --data")
    ds = load_dataset(args.data)
    if not ds.records:
        raise FileNotFoundError(f"no valid scenes in {args.data}")
    psnrs = []
    for m in SCALING_QUERY_COUNTS:
        cfg = _merged_config(args, m=m)
        run_dir = out / f"m{m:03d}"
        trainer = Trainer(cfg, ds, run_dir=run_dir)
        trainer.fit()
        vals = []
        for rec in ds.records:
            targets = rec.load_images()
            # v=1: condition on the first view alone, so the table is an
            # exact function of the trained weights (no noise placeholders)
            result = generate(trainer, targets[:1], rec.poses[:1], rec.poses,
                              v=1, seed=args.seed)
            vals.extend(psnr(result.renders[i], targets[i])
                        for i in range(1, rec.n_views))
        vals = [v for v in vals if np.isfinite(v)]
        psnrs.append(float(np.mean(vals)))
        print(f"M={m:4d}: novel-view PSNR {psnrs[-1]:.2f} dB "
              f"({trainer.step} steps)")
    payload = {"m": list(SCALING_QUERY_COUNTS), "psnr": psnrs,
               "seed": args.seed, "n_iter": _merged_config(args, m=64).n_iter,
               "dataset": str(args.data)}
    with open(out / "scaling.json", "w") as fh:
        json.dump(payload, fh, indent=1)
    plot_scaling(list(SCALING_QUERY_COUNTS), psnrs, out / "scaling.png")
    drops = [psnrs[i] - psnrs[i + 1] for i in range(len(psnrs) - 1)]
    worst = max(drops) if drops else 0.0
    if worst > 0.2:
        print(f"warning: PSNR drops {worst:.2f} dB when M grows "
              f"(soft trend check)", file=sys.stderr)
    print(f"scaling table and plot in {out}")
    return 0


# ------------------------------------------------------------------ parser

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sparsegen",
        description="Sparse anchor-query 3D Gaussian generation toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--out", default=None,
                       help="output directory (default $SPARSEGEN_RUN_DIR)")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--config", default=None,
                       help="JSON file with TrainConfig fields")

    p = sub.add_parser("make-data", help="synthesize a Gaussian-world dataset")
    common(p)
    p.add_argument("--scenes", type=int, default=20)
    p.add_argument("--gaussians", type=int, default=48)
    p.add_argument("--views", type=int, default=16)
    p.add_argument("--resolution", type=int, default=64)
    p.set_defaults(func=cmd_make_data)

    p = sub.add_parser("train", help="train the generator")
    common(p)
    p.add_argument("--data", default=None, help="dataset root")
    p.add_argument("--desk", action="store_true",
                   help="start from the small-scale preset")
    p.add_argument("--queries", type=int, default=None, help="override M")
    p.add_argument("--resolution", type=int, default=None)
    p.add_argument("--views", type=int, default=None, help="views per step (V)")
    p.add_argument("--iters", type=int, default=None, help="override n_iter")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("generate", help="one-step generation from a checkpoint")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", default=None,
                   help="dataset providing conditioning views")
    p.add_argument("--scene", default=None, help="scene id (default: first)")
    p.add_argument("--views", type=int, default=None,
                   help="number of conditioning views (default 1)")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("render", help="render a stored .sggs scene")
    common(p)
    p.add_argument("--gaussians", required=True, help="path to a .sggs file")
    p.add_argument("--poses", required=True, help="poses.json to render")
    p.add_argument("--resolution", type=int, default=None)
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("eval", help="bias/utilization report on a dataset")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--renders", default=None,
                   help="directory of pre-rendered views (instead of a "
                        "checkpoint)")
    p.add_argument("--views", type=int, default=None,
                   help="conditioning views per scene (default 1)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("scaling", help="train at M in {64,128,256} and compare")
    common(p)
    p.add_argument("--data", required=True)
    p.set_defaults(desk=True)
    p.add_argument("--resolution", type=int, default=None)
    p.add_argument("--views", type=int, default=None)
    p.add_argument("--iters", type=int, default=None, help="steps per run")
    p.set_defaults(func=cmd_scaling)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code) if e.code is not None else 0
    try:
        return args.func(args)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return 2
    except KeyboardInterrupt:
        return 130
    except Exception as e:  # runtime failure surface
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
