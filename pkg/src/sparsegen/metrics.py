"""Evaluation harness: PSNR/SSIM, conditioning-vs-novel bias gaps, opacity
utilization and per-query locality statistics, generation timing, and plots.
"""
from __future__ import annotations

import math
import statistics
import time
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from .gaussians import GaussianSet
from .geometry import CameraPose, project
from .objective import PerceptualProxy, perceptual_proxy

Tensor = torch.Tensor

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03
TAU_DEFAULT = 1.0 / 255.0


def psnr(a: Tensor, b: Tensor) -> float:
    """10*log10(1/MSE) for images in [0,1]; identical images -> +inf."""
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")
    mse = float((a.double() - b.double()).square().mean())
    return math.inf if mse == 0.0 else -10.0 * math.log10(mse)


def _gaussian_window(size: int, sigma: float) -> Tensor:
    x = torch.arange(size, dtype=torch.float64) - (size - 1) / 2.0
    g = torch.exp(-x.square() / (2 * sigma * sigma))
    g = g / g.sum()
    return torch.outer(g, g)


def ssim(a: Tensor, b: Tensor) -> float:
    """Mean SSIM: 11x11 Gaussian window (sigma 1.5), K1=0.01, K2=0.03, unit
    dynamic range, valid (un-padded) convolution, averaged over channels."""
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")
    if a.ndim == 2:
        a, b = a.unsqueeze(-1), b.unsqueeze(-1)
    if a.ndim == 3:
        a, b = a.unsqueeze(0), b.unsqueeze(0)
    if a.ndim != 4:
        raise ValueError("expected (H, W), (H, W, C) or (V, H, W, C) images")
    v, h, w, c = a.shape
    if h < SSIM_WINDOW or w < SSIM_WINDOW:
        raise ValueError(f"images smaller than the {SSIM_WINDOW}px SSIM window")
    x = a.double().permute(0, 3, 1, 2).reshape(v * c, 1, h, w)
    y = b.double().permute(0, 3, 1, 2).reshape(v * c, 1, h, w)
    win = _gaussian_window(SSIM_WINDOW, SSIM_SIGMA).reshape(1, 1, SSIM_WINDOW,
                                                            SSIM_WINDOW)
    mu_x = F.conv2d(x, win)
    mu_y = F.conv2d(y, win)
    var_x = F.conv2d(x * x, win) - mu_x * mu_x
    var_y = F.conv2d(y * y, win) - mu_y * mu_y
    cov = F.conv2d(x * y, win) - mu_x * mu_y
    c1, c2 = SSIM_K1 ** 2, SSIM_K2 ** 2
    num = (2 * mu_x * mu_y + c1) * (2 * cov + c2)
    den = (mu_x.square() + mu_y.square() + c1) * (var_x + var_y + c2)
    return float((num / den).mean())


# ------------------------------------------------------------------- bias

@dataclass
class BiasReport:
    """Per-metric conditioning-vs-novel means and their gaps (cond - novel)."""

    psnr_cond: float
    psnr_novel: float
    delta_psnr: float
    ssim_cond: float
    ssim_novel: float
    delta_ssim: float
    perc_cond: float
    perc_novel: float
    delta_perc: float
    n_cond: int
    n_novel: int
    n_psnr_inf_cond: int = 0   # sentinel views excluded from the PSNR means
    n_psnr_inf_novel: int = 0

    def as_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


def _mean_excluding_inf(vals: list[float]) -> tuple[float, int]:
    finite = [v for v in vals if math.isfinite(v)]
    n_inf = len(vals) - len(finite)
    if not finite:
        return math.inf, n_inf
    return float(np.mean(finite)), n_inf


def input_view_bias(renders: Tensor, targets: Tensor,
                    cond_indices, proxy: PerceptualProxy | None = None
                    ) -> BiasReport:
    """Split views into conditioning and novel partitions, average each metric
    per partition, and report the gaps."""
    if renders.shape != targets.shape or renders.ndim != 4:
        raise ValueError("renders/targets must be matching (V, H, W, 3) stacks")
    n_views = renders.shape[0]
    cond = sorted(set(int(i) for i in cond_indices))
    if not cond:
        raise ValueError("need at least one conditioning view")
    if any(i < 0 or i >= n_views for i in cond):
        raise ValueError("conditioning index out of range")
    novel = [i for i in range(n_views) if i not in cond]
    if not novel:
        raise ValueError("conditioning views cover every view; nothing novel")
    proxy = proxy or perceptual_proxy()

    def stats(idx: list[int]):
        p = [psnr(renders[i], targets[i]) for i in idx]
        s = [ssim(renders[i], targets[i]) for i in idx]
        d = [float(proxy.distance(renders[i:i + 1], targets[i:i + 1])) for i in idx]
        (p_mean, n_inf) = _mean_excluding_inf(p)
        return p_mean, float(np.mean(s)), float(np.mean(d)), n_inf

    pc, sc, dc, inf_c = stats(cond)
    pn, sn, dn, inf_n = stats(novel)
    return BiasReport(psnr_cond=pc, psnr_novel=pn, delta_psnr=pc - pn,
                      ssim_cond=sc, ssim_novel=sn, delta_ssim=sc - sn,
                      perc_cond=dc, perc_novel=dn, delta_perc=dc - dn,
                      n_cond=len(cond), n_novel=len(novel),
                      n_psnr_inf_cond=inf_c, n_psnr_inf_novel=inf_n)


# ------------------------------------------------------------ utilization

N_HISTOGRAM_BINS = 32


@dataclass
class UtilizationReport:
    n: int
    histogram: np.ndarray            # (32,) counts over opacity in [0,1]
    bin_edges: np.ndarray            # (33,)
    tau: float
    low_opacity_fraction: float      # #{alpha < tau} / N
    query_centers: np.ndarray        # (M, 3) mean decoded center per query
    locality_radius: np.ndarray      # (M,) mean distance to the query centroid
    mean_locality_radius: float
    query_projections: np.ndarray | None = None  # (M, 2) pixel coords
    query_visible: np.ndarray | None = None      # (M,) bool, in front of camera

    def as_dict(self) -> dict:
        out = {"n": self.n, "tau": self.tau,
               "low_opacity_fraction": self.low_opacity_fraction,
               "histogram": self.histogram.tolist(),
               "bin_edges": self.bin_edges.tolist(),
               "query_centers": self.query_centers.tolist(),
               "locality_radius": self.locality_radius.tolist(),
               "mean_locality_radius": self.mean_locality_radius}
        if self.query_projections is not None:
            out["query_projections"] = self.query_projections.tolist()
            out["query_visible"] = self.query_visible.tolist()
        return out


def utilization(gs: GaussianSet, tau: float = TAU_DEFAULT,
                pose: CameraPose | None = None) -> UtilizationReport:
    """Opacity histogram, near-transparent fraction, and per-query locality.

    With a pose, each query's mean center is also projected to pixel coords.
    """
    if gs.provenance is None:
        raise ValueError("per-query statistics need provenance indices")
    op = gs.opacity.detach().double().numpy()
    mu = gs.mu.detach().double().numpy()
    prov = gs.provenance.detach().numpy()
    hist, edges = np.histogram(op, bins=N_HISTOGRAM_BINS, range=(0.0, 1.0))

    m = int(prov.max()) + 1 if len(prov) else 0
    counts = np.bincount(prov, minlength=m).astype(np.float64)
    safe = np.maximum(counts, 1.0)
    centers = np.zeros((m, 3))
    np.add.at(centers, prov, mu)
    centers /= safe[:, None]
    dist = np.linalg.norm(mu - centers[prov], axis=1)
    radius = np.zeros(m)
    np.add.at(radius, prov, dist)
    radius /= safe

    projections = visible = None
    if pose is not None and m:
        uvz, vis = project(pose, centers)
        projections = np.asarray(uvz[:, :2], dtype=np.float64)
        visible = np.asarray(vis, dtype=bool)

    return UtilizationReport(
        n=len(gs), histogram=hist, bin_edges=edges, tau=tau,
        low_opacity_fraction=float(np.mean(op < tau)) if len(op) else 0.0,
        query_centers=centers, locality_radius=radius,
        mean_locality_radius=float(radius.mean()) if m else 0.0,
        query_projections=projections, query_visible=visible)


# ----------------------------------------------------------------- timing

@dataclass
class TimingReport:
    median: float
    times: list[float] = field(default_factory=list)  # post-warmup seconds

    def as_dict(self) -> dict:
        return {"median": self.median, "times": self.times}


def time_reconstruction(source, cond_images=None, cond_poses=None, *,
                        n_runs: int = 3, warmup: int = 1,
                        **generate_kwargs) -> TimingReport:
    """Median wall-clock seconds of generate() over n_runs (warmup excluded)."""
    from .infer import generate
    if n_runs < 1:
        raise ValueError("n_runs must be positive")
    times = []
    for i in range(warmup + n_runs):
        t0 = time.perf_counter()
        generate(source, cond_images, cond_poses, **generate_kwargs)
        dt = time.perf_counter() - t0
        if i >= warmup:
            times.append(dt)
    return TimingReport(median=float(statistics.median(times)), times=times)


# ------------------------------------------------------------------ plots

def plot_opacity_histogram(report: UtilizationReport, path) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    fig, ax = plt.subplots(figsize=(5, 3.2))
    widths = np.diff(report.bin_edges)
    ax.bar(report.bin_edges[:-1], report.histogram, width=widths,
           align="edge", color="#4878cf", edgecolor="white")
    ax.axvline(report.tau, color="crimson", linestyle="--", linewidth=1,
               label=f"tau = {report.tau:.4f}")
    ax.set_xlabel("opacity")
    ax.set_ylabel("count")
    ax.set_title(f"opacity histogram (low-opacity fraction "
                 f"{report.low_opacity_fraction:.3f})")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_query_projections(report: UtilizationReport, path,
                           background=None) -> None:
    if report.query_projections is None:
        raise ValueError("report has no projections; pass a pose to utilization")
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    fig, ax = plt.subplots(figsize=(4.5, 4.5))
    if background is not None:
        ax.imshow(np.asarray(background), origin="upper")
    uv = report.query_projections[report.query_visible]
    ax.scatter(uv[:, 0], uv[:, 1], s=8, c="#d65f5f", alpha=0.7,
               edgecolors="none")
    ax.set_title("query centers projected to the image plane")
    ax.set_xlabel("u (px)")
    ax.set_ylabel("v (px)")
    if background is None:
        ax.invert_yaxis()
        ax.set_aspect("equal")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_scaling(ms: list[int], values: list[float], path,
                 ylabel: str = "PSNR (dB)") -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    from matplotlib.ticker import ScalarFormatter
    fig, ax = plt.subplots(figsize=(5, 3.2))
    ax.plot(ms, values, marker="o", color="#4878cf")
    ax.set_xscale("log", base=2)
    ax.set_xticks(ms)
    ax.get_xaxis().set_major_formatter(ScalarFormatter())
    ax.set_xlabel("anchor queries M")
    ax.set_ylabel(ylabel)
    ax.set_title("quality vs query count")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
