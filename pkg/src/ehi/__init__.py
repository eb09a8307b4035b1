"""Jointly trained encoder head and tree index for dense retrieval."""

from .estimator import EHIRetriever, IVFRetriever
from .trainer import TrainConfig, TrainingData, gradient_check, train

__all__ = ["EHIRetriever", "IVFRetriever", "TrainConfig", "TrainingData", "gradient_check",
           "train"]
