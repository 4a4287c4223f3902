"""Training loop: Adam over the full generator on rectified-flow view batches,
with versioned checkpoints that resume bit-identically, plus a direct
scene-fitting utility that proves the renderer+optimizer loop recovers a
known Gaussian world.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .data import DatasetIndex, SceneRecord, load_dataset
from .flow import ViewBatch, sample_training_batch
from .gaussians import GaussianSet
from .model import ModelConfig, SparseGenModel
from .objective import (LossBreakdown, PerceptualProxy, combine,
                        multilayer_loss, offset_reg, opacity_loss, recon_loss)
from .splatter import render, write_png

CHECKPOINT_VERSION = 1


@dataclass
class TrainConfig:
    """Run configuration; the defaults are the full-scale training recipe."""

    # architecture
    m: int = 512              # anchor queries
    k: int = 10               # Gaussians per query
    d: int = 512              # token width
    resolution: int = 128     # square view size (H = W)
    d_th: int = 64            # frustum depth samples
    s_max: float = 0.1        # Gaussian scale clip
    n_enc: int = 6            # token encoder layers
    n_dec: int = 6            # query decoder layers
    delta: float = 0.1        # offset regularizer threshold
    # loss weights
    lambda_l2: float = 1.0
    lambda_perc: float = 0.1
    lambda_occ: float = 0.1
    lambda_reg: float = 0.05
    lambda_inter: float = 0.1
    # optimization
    n_iter: int = 300_000
    lr: float = 2e-5
    beta1: float = 0.9
    beta2: float = 0.99
    grad_clip: float = 1.0
    batch_size: int = 8
    # view sampling
    v: int = 5                # views per scene per step
    n_noisy: int = 3          # how many of them get noised
    p_drop: float = 0.3       # independent view dropout
    # backbone details
    patch: int = 8
    backbone_depth: int = 6
    n_heads: int = 8
    n_freq: int = 8
    # run plumbing
    seed: int = 0
    dataset: str = ""
    checkpoint_interval: int = 1000
    log_interval: int = 50

    def __post_init__(self):
        for name in ("m", "k", "d", "resolution", "d_th", "n_dec", "batch_size",
                     "v", "patch", "backbone_depth", "n_heads", "n_freq",
                     "checkpoint_interval", "log_interval"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.n_enc < 0 or self.n_iter < 0:
            raise ValueError("n_enc and n_iter must be non-negative")
        if self.lr <= 0 or self.grad_clip <= 0 or self.s_max <= 0 or self.delta <= 0:
            raise ValueError("lr, grad_clip, s_max, delta must be positive")
        for b in (self.beta1, self.beta2):
            if not 0.0 < b < 1.0:
                raise ValueError("betas must lie in (0, 1)")
        if not 0 <= self.n_noisy <= self.v:
            raise ValueError(f"n_noisy={self.n_noisy} outside [0, {self.v}]")
        if not 0.0 <= self.p_drop < 1.0:
            raise ValueError("p_drop must lie in [0, 1)")
        if self.resolution % self.patch:
            raise ValueError("resolution must be divisible by patch size")

    @classmethod
    def desk(cls, **overrides) -> "TrainConfig":
        """Small-scale preset that trains in hours on one CPU."""
        args = dict(m=128, d=256, resolution=64, n_enc=2, n_dec=2,
                    backbone_depth=3, n_iter=20_000, lr=2e-4, batch_size=1,
                    v=3, n_noisy=2)
        args.update(overrides)
        return cls(**args)

    def model_config(self) -> ModelConfig:
        return ModelConfig(m=self.m, k=self.k, d=self.d, d_th=self.d_th,
                           s_max=self.s_max, delta=self.delta, n_enc=self.n_enc,
                           n_dec=self.n_dec, patch=self.patch,
                           backbone_depth=self.backbone_depth,
                           n_heads=self.n_heads, n_freq=self.n_freq)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


class Trainer:
    """Owns model, optimizer, and RNG; one instance per training run."""

    def __init__(self, config: TrainConfig, dataset=None, run_dir=None):
        self.config = config
        if dataset is None and config.dataset:
            dataset = config.dataset
        if isinstance(dataset, (str, Path)):
            dataset = load_dataset(dataset)
        self.dataset: DatasetIndex | None = dataset
        self.model = SparseGenModel(config.model_config(), seed=config.seed)
        self.optimizer = torch.optim.Adam(self.model.parameters(), lr=config.lr,
                                          betas=(config.beta1, config.beta2))
        self.rng = np.random.default_rng(config.seed)
        self.proxy = PerceptualProxy()
        self.step = 0
        self.run_dir = Path(run_dir) if run_dir is not None else None
        if self.run_dir is not None:
            self.run_dir.mkdir(parents=True, exist_ok=True)
        self._views_cache: dict[str, tuple] = {}

    # ---------------------------------------------------------------- data

    def _scene_views(self, rec: SceneRecord):
        cached = self._views_cache.get(rec.scene_id)
        if cached is None:
            images = rec.load_images()
            if images.shape[1] != self.config.resolution or \
                    images.shape[2] != self.config.resolution:
                raise ValueError(
                    f"scene {rec.scene_id} views are "
                    f"{images.shape[1]}x{images.shape[2]}, config expects "
                    f"{self.config.resolution}")
            cached = (images, rec.poses, rec.load_masks())
            self._views_cache[rec.scene_id] = cached
        return cached

    def _sample_records(self) -> list[SceneRecord]:
        records = self.dataset.records
        idx = self.rng.integers(0, len(records), size=self.config.batch_size)
        return [records[i] for i in idx]

    # --------------------------------------------------------------- losses

    def scene_losses(self, vb: ViewBatch) -> tuple[torch.Tensor, LossBreakdown]:
        """Forward on present views, render and supervise all selected views."""
        cfg = self.config
        keep = [i for i in range(len(vb.poses)) if bool(vb.present[i])]
        idx = torch.tensor(keep, dtype=torch.long)
        layers = self.model(vb.images[idx], vb.t[idx],
                            [vb.poses[i] for i in keep])
        final = layers[-1]
        res = cfg.resolution
        outs = [render(final, pose, res, res) for pose in vb.poses]
        pred = torch.stack([o.rgb for o in outs])
        l2, perc = recon_loss(pred, vb.targets, self.proxy)
        if vb.masks is not None:
            occ = opacity_loss(torch.stack([o.accum_alpha for o in outs]),
                               vb.masks)
        else:
            occ = pred.new_zeros(())
        off = offset_reg(final, self.model.queries.refs, cfg.delta)
        inter_preds = [torch.stack([render(gs, pose, res, res).rgb
                                    for pose in vb.poses])
                       for gs in layers[:-1]]
        inter = multilayer_loss(inter_preds, vb.targets,
                                lambda_l2=cfg.lambda_l2,
                                lambda_perc=cfg.lambda_perc, proxy=self.proxy)
        return combine(l2, perc, occ, off, inter, lambda_l2=cfg.lambda_l2,
                       lambda_perc=cfg.lambda_perc, lambda_occ=cfg.lambda_occ,
                       lambda_reg=cfg.lambda_reg,
                       lambda_inter=cfg.lambda_inter)

    # ----------------------------------------------------------------- step

    def training_step(self, records: list[SceneRecord] | None = None
                      ) -> LossBreakdown:
        """One optimizer update over a minibatch of scenes."""
        if records is None:
            records = self._sample_records()
        cfg = self.config
        self.optimizer.zero_grad(set_to_none=True)
        totals, parts = [], []
        for rec in records:
            images, poses, masks = self._scene_views(rec)
            vb = sample_training_batch(images, poses, self.rng, v=cfg.v,
                                       n_noisy=cfg.n_noisy, p_drop=cfg.p_drop,
                                       masks=masks)
            total, bd = self.scene_losses(vb)
            totals.append(total)
            parts.append(bd)
        mean_total = torch.stack(totals).mean()
        if not torch.isfinite(mean_total):
            self._dump_diagnostics(parts)
            raise FloatingPointError(
                f"non-finite loss at step {self.step}: "
                f"{[b.as_dict() for b in parts]}")
        mean_total.backward()
        nn.utils.clip_grad_norm_(self.model.parameters(), cfg.grad_clip)
        self.optimizer.step()
        self.step += 1
        fields = ("l2", "perceptual", "opacity", "offset_reg", "inter", "total")
        return LossBreakdown(**{f: float(np.mean([getattr(b, f) for b in parts]))
                                for f in fields})

    def _dump_diagnostics(self, parts: list[LossBreakdown]):
        payload = {"step": self.step, "config": self.config.to_dict(),
                   "scene_losses": [b.as_dict() for b in parts]}
        out = (self.run_dir or Path.cwd()) / f"diagnostics_step_{self.step}.json"
        with open(out, "w") as fh:
            json.dump(payload, fh, indent=1)

    # ------------------------------------------------------------------ fit

    def fit(self, callback=None) -> Path | None:
        """Run to n_iter (or until callback returns True). Returns the final
        checkpoint path when a run directory is set."""
        if self.dataset is None or len(self.dataset) == 0:
            raise ValueError("dataset is empty; nothing to train on")
        cfg = self.config
        log_path = self.run_dir / "metrics.jsonl" if self.run_dir else None
        while self.step < cfg.n_iter:
            bd = self.training_step()
            if log_path and (self.step % cfg.log_interval == 0
                             or self.step == cfg.n_iter):
                with open(log_path, "a") as fh:
                    fh.write(json.dumps({"step": self.step, **bd.as_dict()}) + "\n")
            if self.run_dir and self.step % cfg.checkpoint_interval == 0:
                self.save(self.run_dir / f"checkpoint_{self.step:07d}.pt")
                self._validation_render()
            if callback is not None and callback(self, bd):
                break
        if self.run_dir:
            return self.save(self.run_dir / "checkpoint_final.pt")
        return None

    def _validation_render(self):
        """Deterministic render of scene 0 from clean views (no RNG use)."""
        cfg = self.config
        rec = self.dataset.records[0]
        images, poses, _ = self._scene_views(rec)
        v = min(cfg.v, images.shape[0])
        with torch.no_grad():
            gs = self.model.generate_scene(images[:v], torch.zeros(v), poses[:v])
            out = render(gs, poses[0], cfg.resolution, cfg.resolution)
        write_png(self.run_dir / f"val_{self.step:07d}.png", out.rgb)

    def save(self, path) -> Path:
        return save_checkpoint(path, self)


# ------------------------------------------------------------- checkpoints

def save_checkpoint(path, trainer: Trainer) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save({
        "version": CHECKPOINT_VERSION,
        "step": trainer.step,
        "model_state": trainer.model.state_dict(),
        "optimizer_state": trainer.optimizer.state_dict(),
        "numpy_rng_state": trainer.rng.bit_generator.state,
        "torch_rng_state": torch.get_rng_state(),
        "forward_count": trainer.model.forward_count,
        "config": trainer.config.to_dict(),
    }, path)
    return path


def load_checkpoint(path, dataset=None, run_dir=None) -> Trainer:
    """Rebuild a Trainer whose next step exactly continues the saved run."""
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if not isinstance(payload, dict) or "version" not in payload:
        raise ValueError(f"{path} is not a training checkpoint")
    if payload["version"] != CHECKPOINT_VERSION:
        raise ValueError(f"checkpoint version {payload['version']} unsupported "
                         f"(expected {CHECKPOINT_VERSION})")
    config = TrainConfig.from_dict(payload["config"])
    trainer = Trainer(config, dataset=dataset, run_dir=run_dir)
    trainer.model.load_state_dict(payload["model_state"])
    trainer.optimizer.load_state_dict(payload["optimizer_state"])
    trainer.rng.bit_generator.state = payload["numpy_rng_state"]
    torch.set_rng_state(payload["torch_rng_state"])
    trainer.model.forward_count = payload["forward_count"]
    trainer.step = payload["step"]
    return trainer


# ------------------------------------------- direct scene-fitting utility

def fit_gaussians_to_views(images: torch.Tensor, poses, n_gaussians: int, *,
                           n_steps: int = 2000, lr: float = 2e-2, seed: int = 0,
                           target_psnr: float | None = None
                           ) -> tuple[GaussianSet, list[float]]:
    """Optimize raw Gaussian parameters against posed GT views.

    Sanity oracle for the differentiable renderer: a random initialization
    must be able to re-explain views that were themselves rendered from
    Gaussians. Returns the fitted set and the per-step PSNR trace.
    """
    if images.ndim != 4 or images.shape[0] != len(poses):
        raise ValueError("need (V, H, W, 3) images matching the pose list")
    rng = np.random.default_rng(seed)
    H, W = images.shape[1:3]
    images = images.to(torch.float32)

    mu = torch.tensor(rng.uniform(-0.6, 0.6, (n_gaussians, 3)),
                      dtype=torch.float32, requires_grad=True)
    log_scale = torch.full((n_gaussians, 3), math.log(0.06), requires_grad=True)
    quat0 = np.concatenate([np.ones((n_gaussians, 1)),
                            rng.normal(0, 0.01, (n_gaussians, 3))], axis=1)
    quat = torch.tensor(quat0, dtype=torch.float32, requires_grad=True)
    color_logit = torch.zeros(n_gaussians, 3, requires_grad=True)
    opacity_logit = torch.full((n_gaussians,), -1.0, requires_grad=True)

    opt = torch.optim.Adam([mu, log_scale, quat, color_logit, opacity_logit],
                           lr=lr)
    trace: list[float] = []
    for step in range(n_steps):
        # cosine decay to lr/10: coarse placement early, fine registration late
        frac = step / max(n_steps - 1, 1)
        for group in opt.param_groups:
            group["lr"] = lr * (0.55 + 0.45 * math.cos(math.pi * frac))
        gs = GaussianSet(mu=mu, scale=torch.exp(log_scale).clamp(max=0.5),
                         rot=quat, color=torch.sigmoid(color_logit),
                         opacity=torch.sigmoid(opacity_logit))
        renders = torch.stack([render(gs, p, H, W).rgb for p in poses])
        mse = F.mse_loss(renders, images)
        opt.zero_grad(set_to_none=True)
        mse.backward()
        opt.step()
        mse_val = float(mse.detach())
        psnr = float("inf") if mse_val == 0 else -10.0 * math.log10(mse_val)
        trace.append(psnr)
        if target_psnr is not None and psnr >= target_psnr:
            break

    with torch.no_grad():
        final = GaussianSet(mu=mu.detach().clone(),
                            scale=torch.exp(log_scale).clamp(max=0.5).detach(),
                            rot=(quat / quat.norm(dim=-1, keepdim=True)).detach(),
                            color=torch.sigmoid(color_logit).detach(),
                            opacity=torch.sigmoid(opacity_logit).detach())
    return final, trace
