"""Dense reference renderer used as an independent oracle in tests.

Evaluates the compositing formula directly with vectorized torch ops over
every (splat, pixel) pair — no pixel lists, no bounding boxes, no culling
other than z > 0. Mirrors the production truncation/clamp constants so
comparisons are exact to floating-point accumulation order.
"""
import torch

from sparsegen.gaussians import GaussianSet, covariance
from sparsegen.geometry import CameraPose
from sparsegen.splatter import SIGMA_REG, W_CUT_DEFAULT, W_MAX


def oracle_render(gs: GaussianSet, pose: CameraPose, H: int, W: int,
                  w_cut: float = W_CUT_DEFAULT):
    dtype = gs.mu.dtype
    q_max = -2.0 * torch.log(torch.tensor(w_cut, dtype=dtype))
    R = pose.R.to(dtype)
    t = pose.t.to(dtype)
    cam = gs.mu @ R.T + t
    keep = cam[:, 2] > 0
    cam = cam[keep]
    x, y, z = cam[:, 0], cam[:, 1], cam[:, 2]
    u = pose.fx * x / z + pose.cx
    v = pose.fy * y / z + pose.cy

    Sigma_w = covariance(gs.scale[keep], gs.rot[keep])
    Sigma_cam = R @ Sigma_w @ R.T
    zero = torch.zeros_like(z)
    J = torch.stack([
        torch.stack([pose.fx / z, zero, -pose.fx * x / z ** 2], -1),
        torch.stack([zero, pose.fy / z, -pose.fy * y / z ** 2], -1),
    ], dim=-2)
    Sigma = J @ Sigma_cam @ J.transpose(-1, -2) + SIGMA_REG * torch.eye(2, dtype=dtype)
    conic = torch.linalg.inv(Sigma)

    order = torch.argsort(z, stable=True)
    ii, jj = torch.meshgrid(torch.arange(H, dtype=dtype),
                            torch.arange(W, dtype=dtype), indexing="ij")
    px = jj + 0.5
    py = ii + 0.5

    T = torch.ones(H, W, dtype=dtype)
    C = torch.zeros(H, W, 3, dtype=dtype)
    color = gs.color[keep].to(dtype)
    alpha = gs.opacity[keep].to(dtype)
    for s in order.tolist():
        dx = px - u[s]
        dy = py - v[s]
        q = conic[s, 0, 0] * dx * dx + 2 * conic[s, 0, 1] * dx * dy + conic[s, 1, 1] * dy * dy
        w = alpha[s] * torch.exp(-0.5 * q)
        w = torch.clamp(w, max=W_MAX)
        w = torch.where(q > q_max, torch.zeros_like(w), w)
        C = C + (T * w).unsqueeze(-1) * color[s]
        T = T * (1 - w)
    return C, 1.0 - T
