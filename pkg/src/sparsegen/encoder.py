"""Timestep-conditioned image tokenizer and 3D positional token branch.

Per view: images are patch-embedded and refined by a small pre-norm
transformer whose LayerNorms are modulated (shift/scale/gate) by an embedding
of that view's timestep. In parallel, every feature-pixel ray is unprojected
to fixed depths and the flattened depth points are mapped pointwise to the
token width. The two branches fuse by elementwise addition and flatten to one
token sequence across views.
"""
from __future__ import annotations

import math

import torch
import torch.nn as nn

from .geometry import CameraPose, unproject_frustum

Tensor = torch.Tensor


def timestep_embedding(t: Tensor, dim: int, max_period: float = 10_000.0) -> Tensor:
    """Sinusoidal embedding of scalars t (shape (V,)) to (V, dim)."""
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) *
                      torch.arange(half, dtype=t.dtype) / half)
    ang = t[:, None] * freqs[None, :]
    emb = torch.cat([torch.cos(ang), torch.sin(ang)], dim=-1)
    if dim % 2:
        emb = torch.cat([emb, torch.zeros_like(emb[:, :1])], dim=-1)
    return emb


def grid_pos_embedding(h: int, w: int, dim: int, dtype=torch.float32) -> Tensor:
    """Fixed 2D sin/cos table, (h*w, dim); half the width per image axis."""
    def axis(n, d):
        pos = torch.arange(n, dtype=dtype)
        freqs = torch.exp(-math.log(10_000.0) * torch.arange(d // 2, dtype=dtype) / (d // 2))
        ang = pos[:, None] * freqs[None, :]
        return torch.cat([torch.sin(ang), torch.cos(ang)], dim=-1)  # (n, d)

    d_axis = dim // 2
    ey = axis(h, d_axis)[:, None, :].expand(h, w, d_axis)
    ex = axis(w, d_axis)[None, :, :].expand(h, w, d_axis)
    out = torch.cat([ey, ex], dim=-1)
    if out.shape[-1] < dim:
        out = torch.cat([out, torch.zeros(h, w, dim - out.shape[-1], dtype=dtype)], -1)
    return out.reshape(h * w, dim)


def _modulate(x: Tensor, shift: Tensor, scale: Tensor) -> Tensor:
    return x * (1 + scale.unsqueeze(1)) + shift.unsqueeze(1)


class AdaLNBlock(nn.Module):
    """Pre-norm attention + MLP block, both modulated by a conditioning vector."""

    def __init__(self, d: int, n_heads: int, mlp_ratio: int = 4):
        super().__init__()
        self.norm1 = nn.LayerNorm(d, elementwise_affine=False)
        self.attn = nn.MultiheadAttention(d, n_heads, batch_first=True)
        self.norm2 = nn.LayerNorm(d, elementwise_affine=False)
        self.mlp = nn.Sequential(nn.Linear(d, mlp_ratio * d), nn.GELU(),
                                 nn.Linear(mlp_ratio * d, d))
        self.modulation = nn.Sequential(nn.SiLU(), nn.Linear(d, 6 * d))
        # small (not zero) init keeps timestep sensitivity alive from step 0
        nn.init.normal_(self.modulation[1].weight, std=0.02)
        nn.init.zeros_(self.modulation[1].bias)

    def forward(self, x: Tensor, cond: Tensor) -> Tensor:
        """x: (V, L, d); cond: (V, d)."""
        sh1, sc1, g1, sh2, sc2, g2 = self.modulation(cond).chunk(6, dim=-1)
        h = _modulate(self.norm1(x), sh1, sc1)
        h, _ = self.attn(h, h, h, need_weights=False)
        x = x + g1.unsqueeze(1) * h
        h = self.mlp(_modulate(self.norm2(x), sh2, sc2))
        return x + g2.unsqueeze(1) * h


class ImageEncoder(nn.Module):
    """Patch-embed + adaLN transformer over each view independently."""

    def __init__(self, d: int = 512, patch: int = 8, depth: int = 6,
                 n_heads: int = 8):
        super().__init__()
        self.d = d
        self.patch = patch
        self.proj = nn.Conv2d(3, d, kernel_size=patch, stride=patch)
        self.t_embed = nn.Sequential(nn.Linear(d, d), nn.SiLU(), nn.Linear(d, d))
        self.blocks = nn.ModuleList(AdaLNBlock(d, n_heads) for _ in range(depth))
        self.norm_out = nn.LayerNorm(d)
        self._pos_cache: dict = {}

    def _pos(self, h: int, w: int, dtype) -> Tensor:
        key = (h, w, dtype)
        if key not in self._pos_cache:
            self._pos_cache[key] = grid_pos_embedding(h, w, self.d, dtype=dtype)
        return self._pos_cache[key]

    def forward(self, images: Tensor, t: Tensor) -> Tensor:
        """images: (V, H, W, 3) in [0,1]; t: (V,) in [0,1] -> (V, H_F, W_F, d)."""
        if images.ndim != 4 or images.shape[-1] != 3:
            raise ValueError(f"expected (V, H, W, 3) images, got {tuple(images.shape)}")
        if t.shape != images.shape[:1]:
            raise ValueError(f"one timestep per view required: {len(t)} t for "
                             f"{images.shape[0]} views")
        V, H, W, _ = images.shape
        if H % self.patch or W % self.patch:
            raise ValueError(f"image size {H}x{W} not divisible by patch {self.patch}")
        x = self.proj(images.permute(0, 3, 1, 2))          # (V, d, H_F, W_F)
        hf, wf = x.shape[-2:]
        x = x.flatten(2).transpose(1, 2)                   # (V, L, d)
        x = x + self._pos(hf, wf, x.dtype)
        cond = self.t_embed(timestep_embedding(t.to(x.dtype), self.d))
        for blk in self.blocks:
            x = blk(x, cond)
        x = self.norm_out(x)
        return x.reshape(V, hf, wf, self.d)


class PositionEncoder(nn.Module):
    """Frustum depth points -> pointwise two-layer net -> per-pixel embedding."""

    def __init__(self, d: int = 512, d_th: int = 64):
        super().__init__()
        self.d = d
        self.d_th = d_th
        self.net = nn.Sequential(nn.Linear(3 * d_th, d), nn.ReLU(), nn.Linear(d, d))

    def forward(self, poses: list[CameraPose], h_feat: int, w_feat: int,
                image_hw: tuple[int, int]) -> Tensor:
        """-> (V, h_feat, w_feat, d), deterministic in the poses."""
        fr = unproject_frustum(poses, h_feat, w_feat, self.d_th, image_hw)
        dtype = self.net[0].weight.dtype
        pts = fr.points.to(dtype).reshape(len(poses), h_feat, w_feat, 3 * self.d_th)
        return self.net(pts)


def fuse(img_tokens: Tensor, pos_tokens: Tensor) -> Tensor:
    """Elementwise sum, flattened to (V*H_F*W_F, d); views keep input order."""
    if img_tokens.shape != pos_tokens.shape:
        raise ValueError(f"token shape mismatch: {tuple(img_tokens.shape)} vs "
                         f"{tuple(pos_tokens.shape)}")
    V, hf, wf, d = img_tokens.shape
    return (img_tokens + pos_tokens).reshape(V * hf * wf, d)
