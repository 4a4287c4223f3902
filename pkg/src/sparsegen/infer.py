"""One-step generation: clean conditioning views plus pure-noise placeholders
go through a single forward pass; the decoded Gaussians render anywhere.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import torch

from .gaussians import GaussianSet
from .geometry import CameraPose, ring_poses
from .model import SparseGenModel
from .splatter import render
from .trainer import Trainer, load_checkpoint

Tensor = torch.Tensor

PLACEHOLDER_RING = dict(radius=2.7, elevation_deg=20.0, near=0.8, far=5.0,
                        focal_scale=1.2)


@dataclass
class GenerationResult:
    gaussians: GaussianSet
    renders: Tensor            # (T, H, W, 3) at the requested target poses
    accum: Tensor              # (T, H, W) composited alpha
    input_poses: list[CameraPose]
    t: Tensor                  # (V,) timesteps fed to the model


def _resolve_model(source) -> tuple[SparseGenModel, object]:
    if isinstance(source, (str, Path)):
        trainer = load_checkpoint(source)
        return trainer.model, trainer.config
    if isinstance(source, Trainer):
        return source.model, source.config
    if isinstance(source, SparseGenModel):
        return source, None
    raise TypeError(f"cannot generate from {type(source).__name__}")


def generate(source, cond_images: Tensor | None = None,
             cond_poses: list[CameraPose] | None = None,
             target_poses: list[CameraPose] | None = None, *,
             v: int | None = None, seed: int = 0,
             placeholder_poses: list[CameraPose] | None = None,
             resolution: int | None = None) -> GenerationResult:
    """Generate a scene from ≤V clean views (0 ⇒ unconditional) in ONE forward.

    `source` is a checkpoint path, a Trainer, or a bare model. Placeholder
    views are filled with standard-normal noise at t=1 and, when no poses are
    supplied for them, sit on a default camera ring around the object.
    """
    model, cfg = _resolve_model(source)
    n_cond = 0 if cond_images is None else cond_images.shape[0]
    if n_cond and (cond_poses is None or len(cond_poses) != n_cond):
        raise ValueError(f"{n_cond} conditioning images need exactly "
                         f"{n_cond} poses")
    if v is None:
        v = cfg.v if cfg is not None else max(n_cond, 1)
    if n_cond > v:
        raise ValueError(f"{n_cond} conditioning views exceed v={v}")
    if resolution is None:
        if n_cond:
            resolution = int(cond_images.shape[1])
        elif cfg is not None:
            resolution = cfg.resolution
        else:
            raise ValueError("resolution required for unconditional "
                             "generation from a bare model")

    n_place = v - n_cond
    if placeholder_poses is None:
        placeholder_poses = ring_poses(n_place, resolution=resolution,
                                       azimuth_offset=0.7,
                                       **PLACEHOLDER_RING) if n_place else []
    if len(placeholder_poses) != n_place:
        raise ValueError(f"{n_place} placeholder slots but "
                         f"{len(placeholder_poses)} poses supplied")

    g = torch.Generator().manual_seed(seed)
    noise = torch.randn(n_place, resolution, resolution, 3, generator=g)
    if n_cond:
        images = torch.cat([cond_images.to(torch.float32), noise])
        poses = list(cond_poses) + list(placeholder_poses)
    else:
        images, poses = noise, list(placeholder_poses)
    t = torch.cat([torch.zeros(n_cond), torch.ones(n_place)])

    with torch.no_grad():
        gs = model.generate_scene(images, t, poses)

    if target_poses is None:
        target_poses = poses
    rgb, accum = render_novel(gs, target_poses, resolution, resolution,
                              with_accum=True)
    return GenerationResult(gaussians=gs, renders=rgb, accum=accum,
                            input_poses=poses, t=t)


def render_novel(gs: GaussianSet, poses: list[CameraPose], h: int, w: int,
                 with_accum: bool = False):
    """Render a decoded set at arbitrary poses with gradients disabled."""
    rgb, accum = [], []
    with torch.no_grad():
        for pose in poses:
            out = render(gs, pose, h, w)
            rgb.append(out.rgb)
            accum.append(out.accum_alpha)
    rgb = torch.stack(rgb) if rgb else torch.zeros(0, h, w, 3)
    if not with_accum:
        return rgb
    return rgb, (torch.stack(accum) if accum else torch.zeros(0, h, w))
