"""Synthetic multi-view datasets rendered from random Gaussian scenes, plus
the on-disk layout reader.

Layout per scene: `<root>/<scene_id>/view_%03d.png`, `poses.json` (JSON array
aligned with the view index), optional `mask_%03d.png`, optional `gt.sggs`.
Ground truth is generated by this package's own renderer, so stored images
are reproducible bit-exactly from `gt.sggs` + poses.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .gaussians import GaussianSet, load_scene, save_scene
from .geometry import CameraPose, look_at_pose
from .splatter import read_png, render, write_png

SCENE_RADIUS = 2.7
NEAR, FAR = 0.8, 5.0


@dataclass
class SceneRecord:
    scene_id: str
    root: Path
    image_paths: list[Path]
    poses: list[CameraPose]
    mask_paths: list[Path] = field(default_factory=list)
    gt_path: Path | None = None

    @property
    def n_views(self) -> int:
        return len(self.image_paths)

    def load_images(self) -> torch.Tensor:
        return torch.stack([read_png(p) for p in self.image_paths])

    def load_masks(self) -> torch.Tensor | None:
        if not self.mask_paths:
            return None
        out = []
        for p in self.mask_paths:
            out.append(read_png(p)[..., 0])
        return torch.stack(out)

    def load_gt(self) -> GaussianSet | None:
        return load_scene(self.gt_path) if self.gt_path else None


@dataclass
class SceneError:
    scene_id: str
    path: Path
    message: str


@dataclass
class DatasetIndex:
    records: list[SceneRecord]
    errors: list[SceneError]

    def __iter__(self):
        return iter(self.records)

    def __len__(self):
        return len(self.records)


def scene_poses(rng: np.random.Generator, n_views: int, resolution: int,
                radius: float = SCENE_RADIUS) -> list[CameraPose]:
    """Object-centric cameras: uniform azimuth spacing (random phase),
    elevation drawn from [-30°, 60°], fixed radius."""
    f = 1.2 * resolution
    c = resolution / 2.0
    phase = rng.uniform(0, 2 * np.pi)
    poses = []
    for k in range(n_views):
        az = phase + 2 * np.pi * k / n_views
        el = np.radians(rng.uniform(-30.0, 60.0))
        eye = (radius * np.cos(el) * np.cos(az),
               radius * np.sin(el),
               radius * np.cos(el) * np.sin(az))
        poses.append(look_at_pose(eye, (0.0, 0.0, 0.0), fx=f, fy=f, cx=c, cy=c,
                                  near=NEAR, far=FAR))
    return poses


def random_blob_scene(rng: np.random.Generator, n_gaussians: int,
                      s_max: float = 0.1) -> GaussianSet:
    """Compound shape: 2-5 colored blobs of clustered primitives in the unit cube."""
    n_blobs = int(rng.integers(2, 6))
    counts = np.full(n_blobs, n_gaussians // n_blobs)
    counts[: n_gaussians - counts.sum()] += 1
    mu, color = [], []
    for c in counts:
        center = rng.uniform(-0.5, 0.5, 3)
        spread = rng.uniform(0.08, 0.22)
        mu.append(np.clip(center + rng.standard_normal((c, 3)) * spread, -0.9, 0.9))
        base = rng.uniform(0.15, 0.95, 3)
        color.append(np.clip(base + rng.uniform(-0.1, 0.1, (c, 3)), 0.0, 1.0))
    rot = rng.standard_normal((n_gaussians, 4))
    rot /= np.linalg.norm(rot, axis=-1, keepdims=True)
    return GaussianSet(
        mu=torch.tensor(np.concatenate(mu), dtype=torch.float32),
        scale=torch.tensor(rng.uniform(0.02, 0.9 * s_max, (n_gaussians, 3)),
                           dtype=torch.float32),
        rot=torch.tensor(rot, dtype=torch.float32),
        color=torch.tensor(np.concatenate(color), dtype=torch.float32),
        opacity=torch.tensor(rng.uniform(0.5, 1.0, n_gaussians),
                             dtype=torch.float32),
    )


def make_synthetic_dataset(out_dir, n_scenes: int, gaussians_per_scene: int,
                           n_views: int, resolution: int, seed: int) -> Path:
    """Generate scenes, render views, write images/poses/masks/GT. Deterministic."""
    if min(n_scenes, gaussians_per_scene, n_views, resolution) < 1:
        raise ValueError("all dataset size parameters must be positive")
    root = Path(out_dir)
    root.mkdir(parents=True, exist_ok=True)
    for si in range(n_scenes):
        rng = np.random.default_rng([seed, si])
        scene_dir = root / f"scene_{si:04d}"
        scene_dir.mkdir(exist_ok=True)
        gs = random_blob_scene(rng, gaussians_per_scene)
        poses = scene_poses(rng, n_views, resolution)
        for vi, pose in enumerate(poses):
            out = render(gs, pose, resolution, resolution)
            write_png(scene_dir / f"view_{vi:03d}.png", out.rgb)
            mask = (out.accum_alpha > 0.5).to(torch.float32)
            write_png(scene_dir / f"mask_{vi:03d}.png",
                      mask.unsqueeze(-1).expand(-1, -1, 3))
        with open(scene_dir / "poses.json", "w") as fh:
            json.dump([p.to_json_dict() for p in poses], fh, indent=1)
        save_scene(scene_dir / "gt.sggs", gs)
    return root


def _load_scene_record(scene_dir: Path) -> SceneRecord:
    pose_file = scene_dir / "poses.json"
    if not pose_file.is_file():
        raise FileNotFoundError("poses.json missing")
    with open(pose_file) as fh:
        raw = json.load(fh)
    if not isinstance(raw, list) or not raw:
        raise ValueError("poses.json must be a non-empty JSON array")
    poses = [CameraPose.from_json_dict(d) for d in raw]
    images = sorted(scene_dir.glob("view_*.png"))
    if len(images) != len(poses):
        raise ValueError(f"{len(images)} images for {len(poses)} poses")
    if len(images) < 2:
        raise ValueError("a scene needs at least 2 views")
    sizes = set()
    from PIL import Image
    for p in images:
        with Image.open(p) as im:
            sizes.add(im.size)
    if len(sizes) > 1:
        raise ValueError(f"inconsistent view resolutions: {sorted(sizes)}")
    masks = sorted(scene_dir.glob("mask_*.png"))
    if masks and len(masks) != len(images):
        raise ValueError(f"{len(masks)} masks for {len(images)} images")
    gt = scene_dir / "gt.sggs"
    return SceneRecord(scene_id=scene_dir.name, root=scene_dir,
                       image_paths=images, poses=poses, mask_paths=masks,
                       gt_path=gt if gt.is_file() else None)


def load_dataset(path) -> DatasetIndex:
    """Validated scene records in lexicographic id order; malformed scenes
    are reported as structured errors, not exceptions."""
    root = Path(path)
    records, errors = [], []
    if not root.is_dir():
        return DatasetIndex(records, [SceneError("", root, "not a directory")])
    for scene_dir in sorted(p for p in root.iterdir() if p.is_dir()):
        try:
            records.append(_load_scene_record(scene_dir))
        except Exception as e:
            errors.append(SceneError(scene_dir.name, scene_dir, str(e)))
    return DatasetIndex(records, errors)
