"""Differentiable anisotropic-Gaussian splatting (CPU)."""

from .adam import AdamGroup, AdamState, adam_step
from .cloud import (Gaussian, GaussianCloud, export_ply, load_cloud, save_cloud)
from .mvs import MvsResult, mvs_backward, mvs_consistency, mvs_loss
from .projection import gaussian_normal, project, project_cloud
from .rasterizer import (RenderOutput, rasterize, rasterize_backward,
                         rasterize_with_cache)

__all__ = [
    "AdamGroup", "AdamState", "adam_step", "Gaussian", "GaussianCloud",
    "export_ply", "load_cloud", "save_cloud", "MvsResult", "mvs_backward",
    "mvs_consistency", "mvs_loss", "gaussian_normal", "project",
    "project_cloud", "RenderOutput", "rasterize", "rasterize_backward",
    "rasterize_with_cache",
]
