"""Base estimator for single-view hand pose prediction."""

from abc import ABC, abstractmethod
from dataclasses import dataclass
from typing import List, Sequence, Tuple

import numpy as np

from ..errors import InvalidInputError
from ..geometry import NUM_JOINTS, wrist_align
from ..scene import DualViewSample, HeatmapStack

NUM_VIEWS = 2
GAIN_BOUND = 2.0


@dataclass(frozen=True)
class Prediction:
    """Joints and heatmaps predicted for one view."""

    joints: np.ndarray
    heatmaps: HeatmapStack

    def __post_init__(self) -> None:
        if len(self.heatmaps.values) != len(self.joints):
            raise InvalidInputError("heatmap count must equal joint count")


@dataclass
class EstimatorParams:
    """Parameters of the correction head, one set per view.

    Attributes:
        offsets: Per-joint additive offsets, shape ``(2, 21, 3)`` in mm.
        gains: One 3x3 linear gain per view, shape ``(2, 3, 3)``, shared by
            all joints of that view.
    """

    offsets: np.ndarray
    gains: np.ndarray

    @classmethod
    def identity(cls) -> "EstimatorParams":
        """Zero offsets and identity gains: predictions equal raw estimates."""
        return cls(
            offsets=np.zeros((NUM_VIEWS, NUM_JOINTS, 3)),
            gains=np.tile(np.eye(3), (NUM_VIEWS, 1, 1)),
        )

    @classmethod
    def zeros(cls) -> "EstimatorParams":
        return cls(offsets=np.zeros((NUM_VIEWS, NUM_JOINTS, 3)), gains=np.zeros((NUM_VIEWS, 3, 3)))

    def copy(self) -> "EstimatorParams":
        return EstimatorParams(self.offsets.copy(), self.gains.copy())

    def __add__(self, other: "EstimatorParams") -> "EstimatorParams":
        return EstimatorParams(self.offsets + other.offsets, self.gains + other.gains)

    def __sub__(self, other: "EstimatorParams") -> "EstimatorParams":
        return EstimatorParams(self.offsets - other.offsets, self.gains - other.gains)

    def __mul__(self, scale: float) -> "EstimatorParams":
        return EstimatorParams(self.offsets * scale, self.gains * scale)

    __rmul__ = __mul__

    def flat(self) -> np.ndarray:
        """All parameters as one vector (offsets first)."""
        return np.concatenate([self.offsets.ravel(), self.gains.ravel()])

    @classmethod
    def from_flat(cls, vector: np.ndarray) -> "EstimatorParams":
        n = NUM_VIEWS * NUM_JOINTS * 3
        vector = np.asarray(vector, dtype=float)
        return cls(
            offsets=vector[:n].reshape(NUM_VIEWS, NUM_JOINTS, 3).copy(),
            gains=vector[n:].reshape(NUM_VIEWS, 3, 3).copy(),
        )

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.offsets)) and np.all(np.isfinite(self.gains)))

    def clip_gains(self, bound: float = GAIN_BOUND) -> "EstimatorParams":
        """Pull each gain back so that ``||G - I||_F <= bound``."""
        gains = self.gains.copy()
        for v in range(NUM_VIEWS):
            delta = gains[v] - np.eye(3)
            norm = np.linalg.norm(delta)
            if norm > bound:
                gains[v] = np.eye(3) + delta * (bound / norm)
        return EstimatorParams(self.offsets.copy(), gains)


def loss(
    pred_v1: Prediction, pred_v2: Prediction, pseudo_v1: np.ndarray, pseudo_v2: np.ndarray
) -> float:
    """Squared L2 distance between predictions and pseudo-labels, both views.

    Predictions are wrist-aligned here; pseudo-labels are expected aligned.

    Returns:
        Loss in mm^2.
    """
    total = 0.0
    for pred, pseudo in ((pred_v1, pseudo_v1), (pred_v2, pseudo_v2)):
        residual = wrist_align(pred.joints) - np.asarray(pseudo, dtype=float)
        total += float(np.sum(residual**2))
    return total


class BaseEstimator(ABC):
    """Base class for pluggable single-view estimators ``H(.|theta)``."""

    @abstractmethod
    def initial_params(self) -> EstimatorParams:
        """Parameters of the pre-adaptation estimator."""
        pass

    @abstractmethod
    def predict(self, params: EstimatorParams, sample: DualViewSample, view: int) -> Prediction:
        """Predict joints and heatmaps for one view of a sample.

        Args:
            params: Estimator parameters.
            sample: The dual-view input.
            view: 0 for view1, 1 for view2.

        Returns:
            The view's prediction in its own camera frame.
        """
        pass

    @abstractmethod
    def loss_gradient(
        self, params: EstimatorParams, sample: DualViewSample, pseudo: Tuple[np.ndarray, np.ndarray]
    ) -> Tuple[float, EstimatorParams]:
        """Loss against pseudo-labels and its gradient with respect to ``params``."""
        pass

    def predict_pair(
        self, params: EstimatorParams, sample: DualViewSample
    ) -> Tuple[Prediction, Prediction]:
        """Predictions for both views."""
        return self.predict(params, sample, 0), self.predict(params, sample, 1)

    def batch_loss_gradient(
        self,
        params: EstimatorParams,
        samples: Sequence[DualViewSample],
        pseudo: Sequence[Tuple[np.ndarray, np.ndarray]],
    ) -> Tuple[float, EstimatorParams]:
        """Mean loss and mean gradient over a batch.

        Accumulation runs in sample order so the result is reproducible.
        """
        if not samples:
            raise InvalidInputError("empty batch")
        total = 0.0
        grad = EstimatorParams.zeros()
        for sample, labels in zip(samples, pseudo):
            value, g = self.loss_gradient(params, sample, labels)
            total += value
            grad = grad + g
        scale = 1.0 / len(samples)
        return total * scale, grad * scale

    def predict_batch(
        self, params: EstimatorParams, samples: Sequence[DualViewSample]
    ) -> List[Tuple[Prediction, Prediction]]:
        return [self.predict_pair(params, s) for s in samples]
