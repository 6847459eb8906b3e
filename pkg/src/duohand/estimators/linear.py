"""Linear correction head over corrupted detections."""

from typing import Tuple

import numpy as np

from ..geometry import WRIST, wrist_align
from ..scene import DualViewSample
from .base import NUM_VIEWS, BaseEstimator, EstimatorParams, Prediction


class LinearCorrectionEstimator(BaseEstimator):
    """Estimator whose prediction is ``G_v x + o_v`` per view.

    ``x`` is the raw (corrupted) detection of the view. Heatmaps are passed
    through untouched: they describe how confident the detection was, which a
    correction of the 3D joints does not change.
    """

    def initial_params(self) -> EstimatorParams:
        return EstimatorParams.identity()

    def predict(self, params: EstimatorParams, sample: DualViewSample, view: int) -> Prediction:
        joints = sample.raw[view] @ params.gains[view].T + params.offsets[view]
        return Prediction(joints=joints, heatmaps=sample.heatmaps[view])

    def loss_gradient(
        self, params: EstimatorParams, sample: DualViewSample, pseudo: Tuple[np.ndarray, np.ndarray]
    ) -> Tuple[float, EstimatorParams]:
        """Exact gradient of the squared-L2 loss.

        With aligned prediction ``p_k = G (x_k - x_0) + (o_k - o_0)`` and
        residual ``r_k = p_k - y_k``, the gradient is ``2 r_k`` for offset row
        ``k > 0``, ``-2 sum_k r_k`` for the wrist row, and
        ``2 sum_k r_k (x_k - x_0)^T`` for the gain.
        """
        total = 0.0
        grad = EstimatorParams.zeros()
        for v in range(NUM_VIEWS):
            x = wrist_align(sample.raw[v])
            pred = x @ params.gains[v].T + (params.offsets[v] - params.offsets[v][WRIST])
            residual = pred - np.asarray(pseudo[v], dtype=float)
            total += float(np.sum(residual**2))
            # the aligned wrist is pinned at the origin, so its residual is constant
            residual[WRIST] = 0.0
            grad.offsets[v] = 2.0 * residual
            grad.offsets[v][WRIST] = -2.0 * residual.sum(axis=0)
            grad.gains[v] = 2.0 * residual.T @ x
        return total, grad
