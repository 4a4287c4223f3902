"""Sparse anchor-query 3D Gaussian generation: model, renderer, training and eval."""

from .data import (DatasetIndex, SceneRecord, load_dataset,
                   make_synthetic_dataset)
from .flow import ViewBatch, noise_views, sample_training_batch
from .gaussians import GaussianSet, load_scene, save_scene
from .geometry import CameraPose, look_at_pose, ring_poses
from .infer import GenerationResult, generate, render_novel
from .metrics import (BiasReport, UtilizationReport, input_view_bias, psnr,
                      ssim, time_reconstruction, utilization)
from .model import ModelConfig, SparseGenModel
from .objective import (LossBreakdown, combine, multilayer_loss, offset_reg,
                        opacity_loss, recon_loss)
from .splatter import RenderedImage, read_png, render, write_png
from .trainer import (TrainConfig, Trainer, fit_gaussians_to_views,
                      load_checkpoint, save_checkpoint)

__version__ = "0.1.0"

__all__ = [
    "BiasReport", "CameraPose", "DatasetIndex", "GaussianSet",
    "GenerationResult", "LossBreakdown", "ModelConfig", "RenderedImage",
    "SceneRecord", "SparseGenModel", "TrainConfig", "Trainer",
    "UtilizationReport", "ViewBatch", "combine", "fit_gaussians_to_views",
    "generate", "input_view_bias", "load_checkpoint", "load_dataset",
    "load_scene", "look_at_pose", "make_synthetic_dataset",
    "multilayer_loss", "noise_views", "offset_reg", "opacity_loss", "psnr",
    "read_png", "recon_loss", "render", "render_novel", "ring_poses",
    "sample_training_batch", "save_checkpoint", "save_scene", "ssim",
    "time_reconstruction", "utilization", "write_png",
]
