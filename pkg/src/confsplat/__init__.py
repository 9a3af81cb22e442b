"""Confidence-aware depth-regularized Gaussian splatting on the CPU."""

from .align import AlignConfig, AlignmentResult, align_depth, project_sparse_depth
from .confidence import ConfidenceConfig, confidence_map
from .geometry import CameraModel, GaussianPrimitive, GaussianSet, Raster, SparsePointSet
from .losses import LossConfig, adaptive_weight, depth_loss, image_loss, ssim, total_loss
from .metrics import PointCloud, fscore, m3c2, psnr
from .render import RenderOutput, render, render_backward
from .synth import generate_synthetic_scene
from .trainer import TrainConfig, TrainView, init_from_sparse, train

__version__ = "0.1.0"

__all__ = [
    "AlignConfig", "AlignmentResult", "align_depth", "project_sparse_depth",
    "ConfidenceConfig", "confidence_map",
    "CameraModel", "GaussianPrimitive", "GaussianSet", "Raster", "SparsePointSet",
    "LossConfig", "adaptive_weight", "depth_loss", "image_loss", "ssim", "total_loss",
    "PointCloud", "fscore", "m3c2", "psnr",
    "RenderOutput", "render", "render_backward",
    "generate_synthetic_scene",
    "TrainConfig", "TrainView", "init_from_sparse", "train",
]
