"""The full generator: images + poses + timesteps -> per-layer Gaussian sets.

Forward pipeline: per-view timestep-conditioned image tokens, plus frustum
position tokens, summed and flattened; anchor queries attend into the token
sequence through the expansion decoder; every decoder layer's query state is
decoded to a Gaussian set (the last one is the model output, earlier ones
exist for intermediate supervision).
"""
from __future__ import annotations

from dataclasses import dataclass, field

import torch
import torch.nn as nn

from .encoder import ImageEncoder, PositionEncoder, fuse
from .expansion import ExpansionNet, QueryBank
from .gaussians import GaussianSet
from .geometry import CameraPose

Tensor = torch.Tensor


@dataclass
class ModelConfig:
    m: int = 512              # anchor queries
    k: int = 10               # Gaussians decoded per query
    d: int = 512              # token width
    d_th: int = 64            # depth samples per ray
    s_max: float = 0.1        # scale clip
    delta: float = 0.1        # offset regularizer threshold
    n_enc: int = 6
    n_dec: int = 6
    patch: int = 8
    backbone_depth: int = 6
    n_heads: int = 8
    n_freq: int = 8
    offset_bound: float = field(default=None)  # defaults to 2*delta

    def __post_init__(self):
        if self.offset_bound is None:
            self.offset_bound = 2.0 * self.delta


class SparseGenModel(nn.Module):
    """Anchor-query Gaussian generator; counts forward passes for auditing."""

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        super().__init__()
        self.cfg = cfg
        torch.manual_seed(seed)
        self.image_encoder = ImageEncoder(d=cfg.d, patch=cfg.patch,
                                          depth=cfg.backbone_depth,
                                          n_heads=cfg.n_heads)
        self.position_encoder = PositionEncoder(d=cfg.d, d_th=cfg.d_th)
        self.queries = QueryBank(cfg.m, cfg.d, n_freq=cfg.n_freq, seed=seed)
        self.expansion = ExpansionNet(cfg.d, cfg.n_enc, cfg.n_dec, cfg.k,
                                      n_heads=cfg.n_heads, s_max=cfg.s_max,
                                      offset_bound=cfg.offset_bound)
        self.forward_count = 0

    def forward(self, images: Tensor, t: Tensor,
                poses: list[CameraPose]) -> list[GaussianSet]:
        """images: (V, H, W, 3); t: (V,); -> one GaussianSet per decoder layer.

        The last list element is the model's output scene.
        """
        if images.shape[0] != len(poses):
            raise ValueError(f"{images.shape[0]} images but {len(poses)} poses")
        self.forward_count += 1
        V, H, W, _ = images.shape
        hf, wf = H // self.cfg.patch, W // self.cfg.patch
        f_img = self.image_encoder(images, t)
        f_pos = self.position_encoder(poses, hf, wf, (H, W))
        tokens = fuse(f_img, f_pos)
        states = self.expansion.expand(self.queries(), tokens)
        refs = self.queries.refs
        return [self.expansion.decode(i, s, refs) for i, s in enumerate(states)]

    def generate_scene(self, images: Tensor, t: Tensor,
                       poses: list[CameraPose]) -> GaussianSet:
        """Final-layer scene only (inference path)."""
        return self.forward(images, t, poses)[-1]

    def parameter_groups(self) -> dict[str, list[nn.Parameter]]:
        """Named groups used by trainer diagnostics (gradient-reach checks)."""
        return {
            "image_encoder": list(self.image_encoder.parameters()),
            "position_encoder": list(self.position_encoder.parameters()),
            "queries": list(self.queries.parameters()),
            "expansion": list(self.expansion.parameters()),
        }
