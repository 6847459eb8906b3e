"""Estimator package for duohand."""

from .base import BaseEstimator, EstimatorParams, Prediction, loss
from .linear import LinearCorrectionEstimator
from .momentum import MomentumState, momentum_update

__all__ = [
    'BaseEstimator',
    'EstimatorParams',
    'Prediction',
    'loss',
    'LinearCorrectionEstimator',
    'MomentumState',
    'momentum_update',
]
