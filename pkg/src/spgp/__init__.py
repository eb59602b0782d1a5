"""Gaussian-process regression on embedding tensors pooled by learned positional masks."""

from .estimator import MaskedGPRegressor, MaskPooler
from .gp import GpHyperparams, PredictiveDistribution
from .io import EmbeddingTensor, SplitSpec, TargetTable, load_model, save_model
from .pooling import MaskHead
from .trainer import TrainConfig, TrainedModel, fit, fit_restricted

__all__ = [
    "EmbeddingTensor",
    "GpHyperparams",
    "MaskHead",
    "MaskPooler",
    "MaskedGPRegressor",
    "PredictiveDistribution",
    "SplitSpec",
    "TargetTable",
    "TrainConfig",
    "TrainedModel",
    "fit",
    "fit_restricted",
    "load_model",
    "save_model",
]

__version__ = "0.1.0"
