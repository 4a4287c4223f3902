"""Training losses: reconstruction, opacity, anchor-offset and multi-layer terms.

The perceptual term uses a fixed random-weight strided conv pyramid as a
feature extractor (seeded, never trained) — a self-contained stand-in for a
pretrained perceptual network.
"""
from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .gaussians import GaussianSet

Tensor = torch.Tensor


@dataclass
class LossBreakdown:
    l2: float
    perceptual: float
    opacity: float
    offset_reg: float
    inter: float
    total: float

    def as_dict(self) -> dict:
        return {k: float(getattr(self, k)) for k in
                ("l2", "perceptual", "opacity", "offset_reg", "inter", "total")}


class PerceptualProxy(nn.Module):
    """Frozen 4-stage strided conv pyramid; distance = mean MSE over stages."""

    CHANNELS = (16, 32, 64, 64)

    def __init__(self, seed: int = 1337):
        super().__init__()
        g = torch.Generator().manual_seed(seed)
        layers = []
        c_in = 3
        for c_out in self.CHANNELS:
            conv = nn.Conv2d(c_in, c_out, kernel_size=3, stride=2, padding=1)
            with torch.no_grad():
                conv.weight.copy_(torch.randn(conv.weight.shape, generator=g)
                                  * (c_in * 9) ** -0.5)
                conv.bias.zero_()
            layers.append(conv)
            c_in = c_out
        self.stages = nn.ModuleList(layers)
        for p in self.parameters():
            p.requires_grad_(False)

    def features(self, img: Tensor) -> list[Tensor]:
        """img: (..., H, W, 3) -> per-stage feature maps."""
        x = img.reshape(-1, *img.shape[-3:]).permute(0, 3, 1, 2)
        feats = []
        for conv in self.stages:
            x = F.relu(conv(x))
            feats.append(x)
        return feats

    def distance(self, a: Tensor, b: Tensor) -> Tensor:
        fa, fb = self.features(a), self.features(b)
        return torch.stack([F.mse_loss(x, y) for x, y in zip(fa, fb)]).mean()


_default_proxy: PerceptualProxy | None = None


def perceptual_proxy() -> PerceptualProxy:
    global _default_proxy
    if _default_proxy is None:
        _default_proxy = PerceptualProxy()
    return _default_proxy


def recon_loss(pred: Tensor, target: Tensor,
               proxy: PerceptualProxy | None = None) -> tuple[Tensor, Tensor]:
    """(mean squared error, perceptual distance) between image stacks."""
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: {tuple(pred.shape)} vs "
                         f"{tuple(target.shape)}")
    l2 = F.mse_loss(pred, target)
    perc = (proxy or perceptual_proxy()).distance(pred, target)
    return l2, perc


def opacity_loss(accum_alpha: Tensor, mask: Tensor) -> Tensor:
    """MSE between rendered coverage and a ground-truth alpha mask."""
    if accum_alpha.shape != mask.shape:
        raise ValueError(f"shape mismatch: {tuple(accum_alpha.shape)} vs "
                         f"{tuple(mask.shape)}")
    return F.mse_loss(accum_alpha, mask.to(accum_alpha.dtype))


def offset_reg(gs: GaussianSet, refs: Tensor, delta: float) -> Tensor:
    """Mean over all primitives of max(0, ||mu - r|| - delta)^2.

    Zero exactly while every primitive stays within delta of its anchor.
    """
    if gs.provenance is None:
        raise ValueError("offset_reg needs provenance (query index per primitive)")
    anchors = refs[gs.provenance]
    dist = (gs.mu - anchors).norm(dim=-1)
    return F.relu(dist - delta).square().mean()


def multilayer_loss(layer_preds: list[Tensor], target: Tensor,
                    lambda_l2: float = 1.0, lambda_perc: float = 0.1,
                    proxy: PerceptualProxy | None = None) -> Tensor:
    """Mean reconstruction loss over intermediate decoder layers.

    `layer_preds` holds renders for layers 1..N_dec-1 (the final layer is the
    main loss and is excluded by the caller).
    """
    if not layer_preds:
        return target.new_zeros(())
    proxy = proxy or perceptual_proxy()
    terms = []
    for pred in layer_preds:
        l2, perc = recon_loss(pred, target, proxy)
        terms.append(lambda_l2 * l2 + lambda_perc * perc)
    return torch.stack(terms).mean()


def combine(l2: Tensor, perceptual: Tensor, opacity: Tensor, offset: Tensor,
            inter: Tensor, *, lambda_l2: float = 1.0, lambda_perc: float = 0.1,
            lambda_occ: float = 0.1, lambda_reg: float = 0.05,
            lambda_inter: float = 0.1) -> tuple[Tensor, LossBreakdown]:
    total = (lambda_l2 * l2 + lambda_perc * perceptual + lambda_occ * opacity
             + lambda_reg * offset + lambda_inter * inter)
    def val(t: Tensor) -> float:
        return float(t.detach())

    bd = LossBreakdown(l2=val(l2), perceptual=val(perceptual),
                       opacity=val(opacity), offset_reg=val(offset),
                       inter=val(inter), total=val(total))
    return total, bd
