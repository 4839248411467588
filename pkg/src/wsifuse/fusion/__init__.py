"""Learned weighting of per-level predictions."""

from .model import (
    BranchSpec,
    FixedWeights,
    WeightModel,
    load_weight_model,
    loss_gradient,
    predict_weights,
    prepare_pixels,
    prepare_stack,
    prepare_stacks,
    save_weight_model,
)
from .ops import FusionResult, fused_loss_wrt_weights, fusion_loss, softmax, weighted_fuse
from .train import TrainingRecord, WeigherHyper, train_weigher

__all__ = [
    "BranchSpec",
    "FixedWeights",
    "FusionResult",
    "TrainingRecord",
    "WeigherHyper",
    "WeightModel",
    "fused_loss_wrt_weights",
    "fusion_loss",
    "load_weight_model",
    "loss_gradient",
    "predict_weights",
    "prepare_pixels",
    "prepare_stack",
    "prepare_stacks",
    "save_weight_model",
    "softmax",
    "train_weigher",
    "weighted_fuse",
]
