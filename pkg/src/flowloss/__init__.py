"""Noise-gated flow-loss training laboratory for small video diffusion models."""

from .config import TrainConfig, parse_config
from .edm import EdmConfig, gating_fraction, gating_weight, lambda_weight
from .losses import AdditiveGated, Baseline, LossBreakdown, WeightedAverage, combined_loss
from .tensor import Tape, Tensor, backward

__version__ = "0.1.0"

__all__ = [
    "AdditiveGated",
    "Baseline",
    "EdmConfig",
    "LossBreakdown",
    "Tape",
    "Tensor",
    "TrainConfig",
    "WeightedAverage",
    "backward",
    "combined_loss",
    "gating_fraction",
    "gating_weight",
    "lambda_weight",
    "parse_config",
]
