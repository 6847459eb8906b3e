"""Momentum (mean-teacher) copy of the estimator parameters."""

from dataclasses import dataclass

from ..errors import InvalidParameterError
from .base import EstimatorParams

DEFAULT_ETA_THETA = 0.99


@dataclass(frozen=True)
class MomentumState:
    """Temporal average ``theta_bar`` of the live parameters.

    Attributes:
        params: The averaged parameters.
        eta: Ensembling momentum in ``[0, 1)``.
        step: Number of updates applied so far.
    """

    params: EstimatorParams
    eta: float = DEFAULT_ETA_THETA
    step: int = 0

    def __post_init__(self) -> None:
        if not 0.0 <= self.eta < 1.0:
            raise InvalidParameterError(f"momentum eta must be in [0, 1), got {self.eta}")
        if not self.params.is_finite():
            raise InvalidParameterError("momentum parameters must be finite")


def momentum_update(state: MomentumState, theta: EstimatorParams) -> MomentumState:
    """``theta_bar <- eta * theta_bar + (1 - eta) * theta``, elementwise."""
    eta = state.eta
    averaged = EstimatorParams(
        offsets=eta * state.params.offsets + (1.0 - eta) * theta.offsets,
        gains=eta * state.params.gains + (1.0 - eta) * theta.gains,
    )
    return MomentumState(params=averaged, eta=eta, step=state.step + 1)
