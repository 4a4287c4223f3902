"""Learnable 3D anchor queries and the transformer that expands them.

Each anchor is a world-space reference point r_i whose sinusoidal encoding is
projected into the token width; a stack of decoder layers (query
self-attention, then cross-attention into fused image/position tokens)
refines M query states, and per-layer heads decode each state into K
Gaussians per query, with means predicted as bounded offsets from r_i.
"""
from __future__ import annotations

import torch
import torch.nn as nn

from .gaussians import GaussianSet
from .geometry import sinusoidal_pe

Tensor = torch.Tensor


class QueryBank(nn.Module):
    """M learnable anchor positions + the PE -> token projection (FC-ReLU-FC)."""

    def __init__(self, m: int, d: int, n_freq: int = 8, seed: int = 0):
        super().__init__()
        if m < 1:
            raise ValueError(f"need at least one query, got M={m}")
        g = torch.Generator().manual_seed(seed)
        self.refs = nn.Parameter(torch.rand(m, 3, generator=g) * 2 - 1)
        self.n_freq = n_freq
        self.embed = nn.Sequential(nn.Linear(6 * n_freq, d), nn.ReLU(),
                                   nn.Linear(d, d))

    @property
    def m(self) -> int:
        return self.refs.shape[0]

    def forward(self) -> Tensor:
        """Q_i = MLP(PE(r_i)) -> (M, d)."""
        return self.embed(sinusoidal_pe(self.refs, self.n_freq))


class EncoderLayer(nn.Module):
    """Pre-norm self-attention block refining the fused scene tokens."""

    def __init__(self, d: int, n_heads: int, mlp_ratio: int = 4):
        super().__init__()
        self.norm1 = nn.LayerNorm(d)
        self.attn = nn.MultiheadAttention(d, n_heads, batch_first=True)
        self.norm2 = nn.LayerNorm(d)
        self.mlp = nn.Sequential(nn.Linear(d, mlp_ratio * d), nn.GELU(),
                                 nn.Linear(mlp_ratio * d, d))

    def forward(self, x: Tensor) -> Tensor:
        h = self.norm1(x)
        h, _ = self.attn(h, h, h, need_weights=False)
        x = x + h
        return x + self.mlp(self.norm2(x))


class DecoderLayer(nn.Module):
    """Query self-attention followed by cross-attention into scene tokens."""

    def __init__(self, d: int, n_heads: int, mlp_ratio: int = 4):
        super().__init__()
        self.norm_q = nn.LayerNorm(d)
        self.self_attn = nn.MultiheadAttention(d, n_heads, batch_first=True)
        self.norm_x = nn.LayerNorm(d)
        self.cross_attn = nn.MultiheadAttention(d, n_heads, batch_first=True)
        self.norm_mlp = nn.LayerNorm(d)
        self.mlp = nn.Sequential(nn.Linear(d, mlp_ratio * d), nn.GELU(),
                                 nn.Linear(mlp_ratio * d, d))

    def forward(self, q: Tensor, tokens: Tensor) -> Tensor:
        h = self.norm_q(q)
        h, _ = self.self_attn(h, h, h, need_weights=False)
        q = q + h
        h, _ = self.cross_attn(self.norm_x(q), tokens, tokens, need_weights=False)
        q = q + h
        return q + self.mlp(self.norm_mlp(q))


def _head_mlp(d: int, out_dim: int) -> nn.Sequential:
    return nn.Sequential(nn.Linear(d, d), nn.ReLU(), nn.Linear(d, d), nn.ReLU(),
                         nn.Linear(d, out_dim))


class GaussianHead(nn.Module):
    """Four independent FC-ReLU-FC-ReLU-FC MLPs decoding K Gaussians per query.

    Output ranges by construction: scale = clip(exp(raw), s_max); rot = unit
    quaternion around (1,0,0,0); color/opacity sigmoid; mean = anchor +
    offset_bound * (2*sigmoid(raw) - 1) per component.
    """

    def __init__(self, d: int, k: int, s_max: float = 0.1,
                 offset_bound: float = 0.2):
        super().__init__()
        self.k = k
        self.s_max = s_max
        self.offset_bound = offset_bound
        self.cov_head = _head_mlp(d, k * 7)      # 3 log-scale + 4 quaternion
        self.color_head = _head_mlp(d, k * 3)
        self.opacity_head = _head_mlp(d, k * 1)
        self.offset_head = _head_mlp(d, k * 3)
        for head in (self.cov_head, self.color_head, self.opacity_head,
                     self.offset_head):
            nn.init.normal_(head[-1].weight, std=0.01)
            nn.init.zeros_(head[-1].bias)
        with torch.no_grad():
            # start scales at s_max/2 (inside the clip) and opacity ~0.27
            self.cov_head[-1].bias.view(k, 7)[:, :3] = torch.log(
                torch.tensor(s_max / 2))
            self.opacity_head[-1].bias.fill_(-1.0)

    def forward(self, state: Tensor, refs: Tensor) -> GaussianSet:
        """state: (M, d); refs: (M, 3) -> GaussianSet of M*K primitives."""
        m = state.shape[0]
        k = self.k
        cov = self.cov_head(state).view(m, k, 7)
        scale = torch.exp(cov[..., :3]).clamp(max=self.s_max)
        quat = cov[..., 3:]
        base = torch.zeros_like(quat)
        base[..., 0] = 1.0
        quat = quat + base
        quat = quat / quat.norm(dim=-1, keepdim=True)
        color = torch.sigmoid(self.color_head(state).view(m, k, 3))
        opacity = torch.sigmoid(self.opacity_head(state).view(m, k))
        offset = self.offset_bound * (
            2.0 * torch.sigmoid(self.offset_head(state).view(m, k, 3)) - 1.0)
        mu = refs.unsqueeze(1) + offset
        provenance = torch.repeat_interleave(torch.arange(m), k)
        return GaussianSet(mu.reshape(-1, 3), scale.reshape(-1, 3),
                           quat.reshape(-1, 4), color.reshape(-1, 3),
                           opacity.reshape(-1), provenance=provenance)


class ExpansionNet(nn.Module):
    """N_enc token encoder layers + N_dec decoder layers with per-layer heads."""

    def __init__(self, d: int, n_enc: int, n_dec: int, k: int, n_heads: int = 8,
                 s_max: float = 0.1, offset_bound: float = 0.2):
        super().__init__()
        if n_dec < 1:
            raise ValueError("need at least one decoder layer")
        self.enc_layers = nn.ModuleList(EncoderLayer(d, n_heads)
                                        for _ in range(n_enc))
        self.dec_layers = nn.ModuleList(DecoderLayer(d, n_heads)
                                        for _ in range(n_dec))
        self.heads = nn.ModuleList(
            GaussianHead(d, k, s_max=s_max, offset_bound=offset_bound)
            for _ in range(n_dec))

    def expand(self, q: Tensor, tokens: Tensor) -> list[Tensor]:
        """-> all N_dec intermediate query states, each (M, d)."""
        if q.ndim != 2 or tokens.ndim != 2 or q.shape[1] != tokens.shape[1]:
            raise ValueError(f"shape mismatch: queries {tuple(q.shape)}, "
                             f"tokens {tuple(tokens.shape)}")
        x = tokens.unsqueeze(0)
        for layer in self.enc_layers:
            x = layer(x)
        states = []
        h = q.unsqueeze(0)
        for layer in self.dec_layers:
            h = layer(h, x)
            states.append(h.squeeze(0))
        return states

    def decode(self, layer: int, state: Tensor, refs: Tensor) -> GaussianSet:
        return self.heads[layer](state, refs)
