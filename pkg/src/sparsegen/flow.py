"""Rectified-flow noising and training-batch assembly.

Training inputs interpolate linearly between clean images and Gaussian noise,
x_t = (1 - t) x_0 + t eps; the model is supervised to reproduce the clean
views. A batch noises a random subset of the selected views at one shared
strength and may drop views entirely (the token sequence just gets shorter).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .geometry import CameraPose

Tensor = torch.Tensor


@dataclass
class ViewBatch:
    """One scene's training views: inputs, per-view t, poses, dropout, targets."""

    images: Tensor                 # (V, H, W, 3) noisy/clean model inputs
    t: Tensor                      # (V,) in [0, 1]
    poses: list[CameraPose]
    present: Tensor                # (V,) bool view-dropout mask
    targets: Tensor                # (V, H, W, 3) clean supervision images
    masks: Tensor | None = None    # (V, H, W) optional alpha masks

    def __post_init__(self):
        if self.images.shape != self.targets.shape:
            raise ValueError("inputs and targets must have matching shapes")
        v = self.images.shape[0]
        if not (len(self.poses) == v == self.t.shape[0] == self.present.shape[0]):
            raise ValueError("per-view field count mismatch")
        if bool((self.t < 0).any()) or bool((self.t > 1).any()):
            raise ValueError("timesteps must lie in [0, 1]")
        if not bool(self.present.any()):
            raise ValueError("at least one view must be present")


def noise_views(clean: Tensor, t, eps: Tensor) -> Tensor:
    """x_t = (1 - t) x_0 + t eps, evaluated literally (exact at both endpoints).

    `t` is a scalar or a per-view vector broadcast over (V, H, W, 3).
    """
    if clean.shape != eps.shape:
        raise ValueError(f"noise shape {tuple(eps.shape)} != image shape "
                         f"{tuple(clean.shape)}")
    t = torch.as_tensor(t, dtype=clean.dtype)
    while t.ndim < clean.ndim:
        t = t.unsqueeze(-1)
    return (1 - t) * clean + t * eps


def sample_training_batch(images: Tensor, poses: list[CameraPose],
                          rng: np.random.Generator, *, v: int = 5,
                          n_noisy: int = 3, p_drop: float = 0.3,
                          masks: Tensor | None = None) -> ViewBatch:
    """Pick V views, noise a random n_noisy-subset at one shared t ~ U[0,1].

    Clean views keep t=0; dropout removes views independently with
    probability p_drop but always leaves at least one. Targets are the clean
    images of all V selected views.
    """
    n_avail = images.shape[0]
    if n_avail < v:
        raise ValueError(f"scene has {n_avail} views, need at least {v}")
    if not 0 <= n_noisy <= v:
        raise ValueError(f"n_noisy={n_noisy} outside [0, {v}]")
    if not 0.0 <= p_drop < 1.0:
        raise ValueError(f"p_drop={p_drop} outside [0, 1)")
    sel = rng.choice(n_avail, size=v, replace=False)
    clean = images[torch.as_tensor(sel, dtype=torch.long)]
    sel_poses = [poses[i] for i in sel]
    sel_masks = masks[torch.as_tensor(sel, dtype=torch.long)] if masks is not None else None

    noisy_idx = rng.choice(v, size=n_noisy, replace=False)
    t = torch.zeros(v, dtype=clean.dtype)
    shared_t = float(rng.uniform(0.0, 1.0))
    inputs = clean.clone()
    for i in noisy_idx:
        eps = torch.as_tensor(rng.standard_normal(clean.shape[1:]),
                              dtype=clean.dtype)
        inputs[i] = noise_views(clean[i], shared_t, eps)
        t[i] = shared_t

    while True:
        present = torch.as_tensor(rng.random(v) >= p_drop)
        if bool(present.any()):
            break
    return ViewBatch(images=inputs, t=t, poses=sel_poses, present=present,
                     targets=clean, masks=sel_masks)
