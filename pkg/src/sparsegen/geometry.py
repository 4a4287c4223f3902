"""Pinhole cameras, frustum unprojection and sinusoidal encodings of 3D points.

All functions are pure and operate on torch tensors (poses are stored in
float64 for geometric precision; model code casts down as needed).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch

Tensor = torch.Tensor

ROT_ORTHO_TOL = 1e-5


def _as_tensor(x, dtype=torch.float64) -> Tensor:
    t = torch.as_tensor(x, dtype=dtype)
    return t


@dataclass
class CameraPose:
    """Pinhole camera: intrinsics in pixels plus world->camera extrinsics (R, t)."""

    fx: float
    fy: float
    cx: float
    cy: float
    R: Tensor
    t: Tensor
    near: float
    far: float

    def __post_init__(self):
        self.R = _as_tensor(self.R).reshape(3, 3)
        self.t = _as_tensor(self.t).reshape(3)
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        if not (0 < self.near < self.far):
            raise ValueError(f"need 0 < near < far, got near={self.near}, far={self.far}")
        err = (self.R @ self.R.T - torch.eye(3, dtype=self.R.dtype)).abs().max().item()
        if err > ROT_ORTHO_TOL:
            raise ValueError(f"R is not orthonormal (max |R R^T - I| = {err:.2e})")
        if torch.linalg.det(self.R).item() < 0:
            raise ValueError("R must be a proper rotation (det = +1)")

    @property
    def center(self) -> Tensor:
        """Camera center in world coordinates."""
        return -self.R.T @ self.t

    def to_json_dict(self) -> dict:
        return {
            "fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
            "R": [float(v) for v in self.R.reshape(-1)],
            "t": [float(v) for v in self.t],
            "near": self.near, "far": self.far,
        }

    @classmethod
    def from_json_dict(cls, d: dict) -> "CameraPose":
        missing = {"fx", "fy", "cx", "cy", "R", "t", "near", "far"} - set(d)
        if missing:
            raise ValueError(f"pose JSON missing keys: {sorted(missing)}")
        R = d["R"]
        if len(R) != 9:
            raise ValueError(f"pose field 'R' must have 9 row-major floats, got {len(R)}")
        if len(d["t"]) != 3:
            raise ValueError(f"pose field 't' must have 3 floats, got {len(d['t'])}")
        return cls(fx=float(d["fx"]), fy=float(d["fy"]), cx=float(d["cx"]), cy=float(d["cy"]),
                   R=R, t=d["t"], near=float(d["near"]), far=float(d["far"]))


@dataclass
class Frustum:
    """World-space points along every feature-pixel ray at fixed depths.

    points has shape (V, H_F, W_F, d_th, 3); depths are strictly increasing
    along the d_th axis.
    """

    points: Tensor
    depths: Tensor = field(default=None)  # (V, d_th) metric depths used


def project(pose: CameraPose, x_world) -> tuple[Tensor, Tensor]:
    """Project world points to pixel coordinates.

    Args:
        x_world: (..., 3) world points (any float dtype).
    Returns:
        uvz: (..., 3) tensor of (u, v, z_cam); visible: (...,) bool mask,
        False for points at or behind the camera plane (their u, v are
        still computed from the signed depth and should be ignored).
    """
    x = torch.as_tensor(x_world)
    dtype = x.dtype if x.is_floating_point() else torch.float64
    x = x.to(dtype)
    R = pose.R.to(dtype)
    t = pose.t.to(dtype)
    cam = x @ R.T + t
    z = cam[..., 2]
    visible = z > 0
    zs = torch.where(z == 0, torch.full_like(z, torch.finfo(dtype).tiny), z)
    u = pose.fx * cam[..., 0] / zs + pose.cx
    v = pose.fy * cam[..., 1] / zs + pose.cy
    return torch.stack([u, v, z], dim=-1), visible


def unproject(pose: CameraPose, u, v, depth) -> Tensor:
    """Lift pixel coordinates at a metric depth (camera-space z) to world points.

    Exact inverse of project at the same depth. Accepts scalars or tensors
    broadcast against each other; returns (..., 3).
    """
    u = _as_tensor(u)
    v = _as_tensor(v)
    depth = _as_tensor(depth)
    u, v, depth = torch.broadcast_tensors(u, v, depth)
    x_cam = (u - pose.cx) / pose.fx * depth
    y_cam = (v - pose.cy) / pose.fy * depth
    cam = torch.stack([x_cam, y_cam, depth], dim=-1)
    return (cam - pose.t) @ pose.R


def unproject_frustum(poses: list[CameraPose], h_feat: int, w_feat: int, d_th: int,
                      image_hw: tuple[int, int]) -> Frustum:
    """Unproject every feature-grid pixel center to d_th fixed depths.

    Feature-pixel (i, j) centers at ((j+0.5)·W/w_feat, (i+0.5)·H/h_feat) in image
    coordinates; depths linearly spaced over [near, far] per pose. Deterministic.
    """
    if d_th < 1:
        raise ValueError(f"d_th must be >= 1, got {d_th}")
    H, W = image_hw
    all_pts = []
    all_depths = []
    for pose in poses:
        jj = (torch.arange(w_feat, dtype=torch.float64) + 0.5) * (W / w_feat)
        ii = (torch.arange(h_feat, dtype=torch.float64) + 0.5) * (H / h_feat)
        v, u = torch.meshgrid(ii, jj, indexing="ij")  # (h_feat, w_feat)
        depths = torch.linspace(pose.near, pose.far, d_th, dtype=torch.float64) \
            if d_th > 1 else torch.tensor([pose.near], dtype=torch.float64)
        pts = unproject(pose,
                        u[..., None].expand(h_feat, w_feat, d_th),
                        v[..., None].expand(h_feat, w_feat, d_th),
                        depths.view(1, 1, d_th).expand(h_feat, w_feat, d_th))
        all_pts.append(pts)
        all_depths.append(depths)
    return Frustum(points=torch.stack(all_pts), depths=torch.stack(all_depths))


def sinusoidal_pe(x, n_freq: int = 8) -> Tensor:
    """Sinusoidal positional encoding of 3D points.

    Concatenates sin and cos of each coordinate scaled by 2^j for
    j = 0..n_freq-1; output has shape (..., 6*n_freq). Differentiable.
    """
    if n_freq < 1:
        raise ValueError(f"n_freq must be >= 1, got {n_freq}")
    x = torch.as_tensor(x)
    if not x.is_floating_point():
        x = x.to(torch.float64)
    freqs = (2.0 ** torch.arange(n_freq, dtype=x.dtype, device=x.device))
    ang = x.unsqueeze(-2) * freqs.view(n_freq, 1)  # (..., n_freq, 3)
    out = torch.cat([torch.sin(ang), torch.cos(ang)], dim=-1)  # (..., n_freq, 6)
    return out.reshape(*x.shape[:-1], 6 * n_freq)


def look_at_pose(eye, target, fx: float, fy: float, cx: float, cy: float,
                 near: float, far: float, up=(0.0, 1.0, 0.0)) -> CameraPose:
    """Camera at `eye` looking at `target`; +z forward, image rows grow downward."""
    eye = _as_tensor(eye)
    target = _as_tensor(target)
    up = _as_tensor(up)
    fwd = target - eye
    n = fwd.norm()
    if n < 1e-12:
        raise ValueError("eye and target coincide")
    fwd = fwd / n
    right = torch.linalg.cross(fwd, up)
    rn = right.norm()
    if rn < 1e-9:
        # looking straight along up: pick an arbitrary perpendicular right axis
        right = torch.linalg.cross(fwd, torch.tensor([1.0, 0.0, 0.0], dtype=fwd.dtype))
        rn = right.norm()
    right = right / rn
    down = torch.linalg.cross(fwd, right)
    R = torch.stack([right, down, fwd])
    t = -R @ eye
    return CameraPose(fx=fx, fy=fy, cx=cx, cy=cy, R=R, t=t, near=near, far=far)


def ring_poses(n: int, radius: float, elevation_deg: float, resolution: int,
               near: float = 1.0, far: float = 6.0, focal_scale: float = 1.1,
               azimuth_offset: float = 0.0) -> list[CameraPose]:
    """n object-centric cameras on a ring of evenly spaced azimuths."""
    f = focal_scale * resolution
    c = resolution / 2.0
    el = math.radians(elevation_deg)
    poses = []
    for k in range(n):
        az = azimuth_offset + 2.0 * math.pi * k / n
        eye = (radius * math.cos(el) * math.cos(az),
               radius * math.sin(el),
               radius * math.cos(el) * math.sin(az))
        poses.append(look_at_pose(eye, (0.0, 0.0, 0.0), fx=f, fy=f, cx=c, cy=c,
                                  near=near, far=far))
    return poses
