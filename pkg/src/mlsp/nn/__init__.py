"""A small dense/convolutional network engine with exact backpropagation."""
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .gradcheck import NonDeterministicLayerError, grad_check, gradient_errors, relu_margin
from .graph import INPUT, GraphStateError, ModelGraph, backward, forward
from .layers import (LAYER_KINDS, BatchNorm, Concat, Conv2D, Dense, Dropout,
                     GlobalAvgPool, ReLU, ShapeError, Slice, Softmax,
                     SpatialAvgPool, WeightedSum)
from .losses import cross_entropy_loss, mse_loss
from .optim import AdamState, NonFiniteGradientError, adam_step

__all__ = [
    "AdamState", "BatchNorm", "CheckpointError", "Concat", "Conv2D", "Dense",
    "Dropout", "GlobalAvgPool", "GraphStateError", "INPUT", "LAYER_KINDS",
    "ModelGraph", "NonDeterministicLayerError", "NonFiniteGradientError",
    "ReLU", "ShapeError", "Slice", "Softmax", "SpatialAvgPool", "WeightedSum",
    "adam_step", "backward", "cross_entropy_loss", "forward", "grad_check",
    "gradient_errors", "load_checkpoint", "mse_loss", "relu_margin", "save_checkpoint",
]
