"""Explicit 3D Gaussian primitives: covariance math, clipping and scene files.

A scene is stored struct-of-arrays (torch tensors) for rendering speed;
single primitives are exposed as lightweight `Gaussian3D` values. The binary
scene format is little-endian float32 with a 12-byte header:

    magic "SGGS" (4) | version u8 | pad (3) | count u32 LE
    then count x 14 float32 LE per primitive: mu(3) scale(3) rot(4,wxyz) color(3) opacity(1)
"""
from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np
import torch

Tensor = torch.Tensor

MAGIC = b"SGGS"
FORMAT_VERSION = 1
HEADER = struct.Struct("<4sB3xI")
FLOATS_PER_GAUSSIAN = 14
BYTES_PER_GAUSSIAN = FLOATS_PER_GAUSSIAN * 4  # 56


class SceneFormatError(ValueError):
    """Raised on malformed scene bytes; `code` identifies the failure class."""

    def __init__(self, code: str, msg: str):
        super().__init__(f"[{code}] {msg}")
        self.code = code


@dataclass
class Gaussian3D:
    """One primitive: position, per-axis std-dev, rotation (w,x,y,z), RGB, opacity."""

    mu: Tensor
    scale: Tensor
    rot: Tensor
    color: Tensor
    opacity: float

    def __post_init__(self):
        self.mu = torch.as_tensor(self.mu, dtype=torch.float32).reshape(3)
        self.scale = torch.as_tensor(self.scale, dtype=torch.float32).reshape(3)
        self.rot = torch.as_tensor(self.rot, dtype=torch.float32).reshape(4)
        self.color = torch.as_tensor(self.color, dtype=torch.float32).reshape(3)
        self.opacity = float(self.opacity)


class GaussianSet:
    """Ordered collection of primitives, stored as (N, …) tensors.

    provenance, when present, holds for each primitive the index of the
    anchor query that produced it.
    """

    def __init__(self, mu: Tensor, scale: Tensor, rot: Tensor, color: Tensor,
                 opacity: Tensor, provenance: Tensor | None = None):
        n = mu.shape[0]
        self.mu = mu.reshape(n, 3)
        self.scale = scale.reshape(n, 3)
        self.rot = rot.reshape(n, 4)
        self.color = color.reshape(n, 3)
        self.opacity = opacity.reshape(n)
        if provenance is not None:
            provenance = torch.as_tensor(provenance, dtype=torch.long).reshape(n)
        self.provenance = provenance

    def __len__(self) -> int:
        return self.mu.shape[0]

    def __getitem__(self, i: int) -> Gaussian3D:
        return Gaussian3D(self.mu[i], self.scale[i], self.rot[i], self.color[i],
                          float(self.opacity[i]))

    @classmethod
    def from_list(cls, gs: list[Gaussian3D], provenance=None) -> "GaussianSet":
        if not gs:
            z = torch.zeros
            return cls(z(0, 3), z(0, 3), z(0, 4), z(0, 3), z(0), provenance)
        return cls(torch.stack([g.mu for g in gs]),
                   torch.stack([g.scale for g in gs]),
                   torch.stack([g.rot for g in gs]),
                   torch.stack([g.color for g in gs]),
                   torch.tensor([g.opacity for g in gs], dtype=torch.float32),
                   provenance)

    def detach_to(self, dtype=torch.float32) -> "GaussianSet":
        return GaussianSet(*(t.detach().to(dtype) for t in
                             (self.mu, self.scale, self.rot, self.color, self.opacity)),
                           provenance=self.provenance)

    def validate(self, s_max: float | None = None, tol: float = 1e-5):
        """Check primitive invariants; raises ValueError on the first violation."""
        if len(self) == 0:
            return
        qn = self.rot.norm(dim=-1)
        if (qn - 1).abs().max().item() > tol:
            raise ValueError("rotation quaternions must be unit norm")
        if self.scale.min().item() < -tol:
            raise ValueError("scales must be non-negative")
        if s_max is not None and self.scale.max().item() > s_max + tol:
            raise ValueError(f"scales exceed s_max={s_max}")
        for name, t, lo, hi in (("opacity", self.opacity, 0.0, 1.0),
                                ("color", self.color, 0.0, 1.0)):
            if t.min().item() < lo - tol or t.max().item() > hi + tol:
                raise ValueError(f"{name} out of [{lo}, {hi}]")
        if self.provenance is not None and len(self) and self.provenance.min().item() < 0:
            raise ValueError("provenance indices must be non-negative")


def quat_to_rotmat(rot: Tensor) -> Tensor:
    """Unit-normalize quaternions (w,x,y,z) and convert to rotation matrices.

    Accepts (..., 4); returns (..., 3, 3). Differentiable. Zero-norm input
    is an error (no defined rotation).
    """
    norm = rot.norm(dim=-1, keepdim=True)
    if (norm == 0).any():
        raise ValueError("zero-norm quaternion has no rotation")
    w, x, y, z = torch.unbind(rot / norm, dim=-1)
    row0 = torch.stack([1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)], -1)
    row1 = torch.stack([2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)], -1)
    row2 = torch.stack([2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)], -1)
    return torch.stack([row0, row1, row2], dim=-2)


def covariance(scale: Tensor, rot: Tensor) -> Tensor:
    """World-space covariance Σ = R diag(scale²) Rᵀ. Accepts (...,3)/(...,4)."""
    R = quat_to_rotmat(rot)
    S2 = (scale * scale).unsqueeze(-2)  # (..., 1, 3)
    return (R * S2) @ R.transpose(-1, -2)


def clip_params(g, s_max: float):
    """Clamp scales into [0, s_max]; other fields untouched. Idempotent.

    Works on a single Gaussian3D or a whole GaussianSet; returns the same type.
    """
    if isinstance(g, Gaussian3D):
        return Gaussian3D(g.mu, g.scale.clamp(0.0, s_max), g.rot, g.color, g.opacity)
    return GaussianSet(g.mu, g.scale.clamp(0.0, s_max), g.rot, g.color, g.opacity,
                       provenance=g.provenance)


def serialize(gs: GaussianSet) -> bytes:
    """Pack a set into the binary scene format (float32, little-endian)."""
    n = len(gs)
    fields = torch.cat([gs.mu, gs.scale, gs.rot, gs.color, gs.opacity.unsqueeze(-1)],
                       dim=-1)
    arr = fields.detach().cpu().to(torch.float32).numpy().astype("<f4", copy=False)
    return HEADER.pack(MAGIC, FORMAT_VERSION, n) + arr.tobytes()


def deserialize(data: bytes) -> GaussianSet:
    """Parse scene bytes; raises SceneFormatError with a code on malformed input."""
    if len(data) < HEADER.size:
        raise SceneFormatError("truncated", f"need {HEADER.size} header bytes, got {len(data)}")
    magic, version, count = HEADER.unpack_from(data)
    if magic != MAGIC:
        raise SceneFormatError("bad_magic", f"expected {MAGIC!r}, got {magic!r}")
    if version != FORMAT_VERSION:
        raise SceneFormatError("bad_version", f"unsupported version {version}")
    expect = HEADER.size + count * BYTES_PER_GAUSSIAN
    if len(data) != expect:
        raise SceneFormatError("truncated",
                               f"payload for {count} primitives needs {expect} bytes, got {len(data)}")
    arr = np.frombuffer(data, dtype="<f4", offset=HEADER.size).reshape(count,
                                                                       FLOATS_PER_GAUSSIAN)
    if not np.isfinite(arr).all():
        raise SceneFormatError("nan_field", "non-finite value in payload")
    t = torch.from_numpy(arr.copy())
    return GaussianSet(t[:, 0:3], t[:, 3:6], t[:, 6:10], t[:, 10:13], t[:, 13])


def save_scene(path, gs: GaussianSet):
    with open(path, "wb") as f:
        f.write(serialize(gs))


def load_scene(path) -> GaussianSet:
    with open(path, "rb") as f:
        return deserialize(f.read())
