"""Slim U-Net segmentation lab: numpy autodiff, U-Net variants, losses,
metrics, annotation rasterization, phantom data and a training harness."""

from .losses import LossSpec, bce_loss, composite_loss, dice_loss, jaccard_loss
from .metrics import (
    ConfusionCounts,
    MetricsReport,
    aggregate_folds,
    binarize,
    confusion,
    metrics_from_counts,
)
from .network import (
    LayerGraph,
    Network,
    build_slim_unet,
    build_std_unet,
    count_macs,
    count_params,
    init_params,
)
from .training import TrainingConfig, cross_validate, fit, train_model

__version__ = "0.1.0"

__all__ = [
    "ConfusionCounts",
    "LayerGraph",
    "LossSpec",
    "MetricsReport",
    "Network",
    "TrainingConfig",
    "aggregate_folds",
    "bce_loss",
    "binarize",
    "build_slim_unet",
    "build_std_unet",
    "composite_loss",
    "confusion",
    "count_macs",
    "count_params",
    "cross_validate",
    "dice_loss",
    "fit",
    "init_params",
    "jaccard_loss",
    "metrics_from_counts",
    "train_model",
]
