"""Stereo-constrained pseudo-labels.

Two sources are combined: attention-based merging (ABM), which trusts, joint
by joint, whichever view is more confident, and rotation-guided refinement
(RGR), which nudges a prediction pair until the rotation it implies matches
the reference rotation between the cameras.
"""

import logging
import math
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy.optimize import minimize
from scipy.special import expit

from .config import AdaptationConfig, RefineSettings
from .errors import DegenerateConfigurationError, InvalidInputError, InvalidParameterError
from .geometry import NUM_JOINTS, WRIST, as_joint_set, kabsch_from_covariance, kabsch_rotation, so3_mean
from .scene import HeatmapStack

logger = logging.getLogger(__name__)

JointPair = Tuple[np.ndarray, np.ndarray]

_WRIST_TOLERANCE = 1e-9


@dataclass(frozen=True)
class AttentionWeights:
    """Joint-wise trust in each view; ``v1[j] + v2[j] == 1``."""

    v1: np.ndarray
    v2: np.ndarray

    def __post_init__(self) -> None:
        if self.v1.shape != (NUM_JOINTS,) or self.v2.shape != (NUM_JOINTS,):
            raise InvalidInputError("attention weights must have one entry per joint")
        if np.any(self.v1 < 0) or np.any(self.v1 > 1) or np.any(self.v2 < 0) or np.any(self.v2 > 1):
            raise InvalidInputError("attention weights must lie in [0, 1]")

    @classmethod
    def uniform(cls, value: float = 0.5) -> "AttentionWeights":
        v1 = np.full(NUM_JOINTS, value)
        return cls(v1=v1, v2=1.0 - v1)


@dataclass(frozen=True)
class RefineDiagnostics:
    """What the refinement did for one pair.

    ``initial_objective``/``final_objective`` are the minimized objective
    (rotation gap plus proximity); the ``rotation_gap`` pair is
    ``||R - R'||_F^2`` alone.
    """

    initial_objective: float
    final_objective: float
    initial_rotation_gap: float
    final_rotation_gap: float
    iterations: int
    fallback: bool = False
    message: str = ""


@dataclass(frozen=True)
class PseudoLabelPair:
    """Wrist-aligned pseudo-labels of both views, each in its own frame."""

    v1: np.ndarray
    v2: np.ndarray
    provenance: str = "fused"
    diagnostics: Optional[RefineDiagnostics] = None

    def __post_init__(self) -> None:
        for label in (self.v1, self.v2):
            if np.any(np.abs(label[WRIST]) > _WRIST_TOLERANCE):
                raise InvalidInputError("pseudo-labels must be wrist-aligned")

    def as_tuple(self) -> JointPair:
        return self.v1, self.v2


def joint_attention(h1: HeatmapStack, h2: HeatmapStack, beta: float) -> AttentionWeights:
    """Weights ``beta^max(h_j^v) / sum_v beta^max(h_j^v)`` per joint.

    ``beta = inf`` selects the view with the larger peak (0.5/0.5 on ties);
    ``beta = 1`` averages the views.

    Raises:
        InvalidParameterError: if ``beta <= 0``.
    """
    if not beta > 0:
        raise InvalidParameterError(f"beta must be > 0, got {beta}")
    p1 = h1.peak_values()
    p2 = h2.peak_values()
    if math.isinf(beta):
        w1 = np.where(p1 > p2, 1.0, np.where(p1 < p2, 0.0, 0.5))
    else:
        d = (p1 - p2) * math.log(beta)
        # evaluate the >= 0.5 side and take its complement exactly
        big = expit(np.abs(d))
        w1 = np.where(d >= 0, big, 1.0 - big)
    return AttentionWeights(v1=w1, v2=1.0 - w1)


def _check_aligned(*joint_sets: np.ndarray) -> None:
    for j in joint_sets:
        if np.any(np.abs(j[WRIST]) > _WRIST_TOLERANCE):
            raise InvalidInputError("inputs must be wrist-aligned (wrist at the origin)")


def abm_merge(j1: np.ndarray, j2: np.ndarray, w: AttentionWeights, r: np.ndarray) -> JointPair:
    """Attention-based merge of two wrist-aligned predictions.

    ``y1 = w1 * j1 + w2 * (R^T j2)`` and ``y2 = w1 * (R j1) + w2 * j2``, with the
    same weights used for both output frames.
    """
    j1 = as_joint_set(j1)
    j2 = as_joint_set(j2)
    _check_aligned(j1, j2)
    r = np.asarray(r, dtype=float)
    w1 = w.v1[:, None]
    w2 = w.v2[:, None]
    # row-vector joints: R x  ==  x @ R.T
    y1 = w1 * j1 + w2 * (j2 @ r)
    y2 = w1 * (j1 @ r.T) + w2 * j2
    return y1, y2


class _RefineProblem:
    """Objective of the refinement over the 2 x 20 x 3 non-wrist coordinates.

    The optimizer works in ``u = (x - x0) / sqrt(S)`` where ``S`` is the
    squared norm of the input pair, so the proximity term is ``lambda |u|^2``
    and the rotation gap has unit-order curvature whatever the hand size.
    """

    def __init__(self, j1: np.ndarray, j2: np.ndarray, r_target: np.ndarray, proximity: float):
        self.x0 = np.concatenate([j1[1:].ravel(), j2[1:].ravel()])
        self.r_target = r_target
        self.proximity = proximity
        self.n = self.x0.size // 2
        self.scale = math.sqrt(max(float(self.x0 @ self.x0), _WRIST_TOLERANCE))

    def to_coords(self, u: np.ndarray) -> np.ndarray:
        return self.x0 + self.scale * u

    def unpack(self, xs: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        m = xs.shape[0]
        j1 = np.zeros((m, NUM_JOINTS, 3))
        j2 = np.zeros((m, NUM_JOINTS, 3))
        j1[:, 1:] = xs[:, : self.n].reshape(m, NUM_JOINTS - 1, 3)
        j2[:, 1:] = xs[:, self.n :].reshape(m, NUM_JOINTS - 1, 3)
        return j1, j2

    def _gap(self, h: np.ndarray) -> np.ndarray:
        return np.sum((self.r_target - kabsch_from_covariance(h)) ** 2, axis=(-2, -1))

    def rotation_gap(self, xs: np.ndarray) -> np.ndarray:
        j1, j2 = self.unpack(xs)
        return self._gap(np.einsum("mki,mkj->mij", j1, j2))

    def value(self, u: np.ndarray) -> float:
        gap = self.rotation_gap(self.to_coords(u)[None, :])[0]
        return float(gap + self.proximity * (u @ u))

    def gradient(self, u: np.ndarray, step: float) -> np.ndarray:
        """Chain rule through the cross-covariance ``H = J1^T J2``.

        Only the 9 entries of ``H`` are differenced, in one batch of 18
        decompositions; ``dgap/dJ1 = J2 G^T`` and ``dgap/dJ2 = J1 G``.
        """
        j1, j2 = self.unpack(self.to_coords(u)[None, :])
        j1, j2 = j1[0], j2[0]
        h = j1.T @ j2
        delta = step * max(float(np.linalg.norm(h)), _WRIST_TOLERANCE)
        basis = np.eye(9).reshape(9, 3, 3) * delta
        gaps = self._gap(np.concatenate([h + basis, h - basis]))
        g = ((gaps[:9] - gaps[9:]) / (2.0 * delta)).reshape(3, 3)
        grad = np.concatenate([(j2 @ g.T)[1:].ravel(), (j1 @ g)[1:].ravel()])
        return self.scale * grad + 2.0 * self.proximity * u


def rgr_refine(
    j1: np.ndarray, j2: np.ndarray, r_target: np.ndarray, settings: RefineSettings
) -> Tuple[np.ndarray, np.ndarray, RefineDiagnostics]:
    """Rotation-guided refinement of a wrist-aligned prediction pair.

    Minimizes::

        ||R - rot(J1, J2)||_F^2
            + lambda (||J1 - j1||^2 + ||J2 - j2||^2) / (||j1||^2 + ||j2||^2)

    with BFGS from ``(j1, j2)``. The proximity term is relative to the size of
    the input pair, so ``lambda`` is unit-free like the rotation gap; at the
    default ``1e-3`` nearly all of a rotation gap is resolved, shared between
    the two views. The gradient differences the rotation gap through the 3x3
    cross-covariance only. The result never has a larger objective than the
    input; if any evaluated point is degenerate the inputs are returned with
    ``fallback``.

    Returns:
        ``(y1, y2, diagnostics)``.
    """
    j1 = as_joint_set(j1)
    j2 = as_joint_set(j2)
    _check_aligned(j1, j2)
    problem = _RefineProblem(j1, j2, np.asarray(r_target, dtype=float), settings.proximity)
    u0 = np.zeros_like(problem.x0)

    try:
        f0 = problem.value(u0)
    except DegenerateConfigurationError as e:
        return j1.copy(), j2.copy(), RefineDiagnostics(
            math.nan, math.nan, math.nan, math.nan, 0, fallback=True, message=str(e)
        )
    if f0 <= settings.tolerance:
        return j1.copy(), j2.copy(), RefineDiagnostics(f0, f0, f0, f0, 0, message="already consistent")

    try:
        result = minimize(
            problem.value,
            u0,
            jac=lambda u: problem.gradient(u, settings.fd_step),
            method="BFGS",
            options={"maxiter": settings.max_iterations, "gtol": settings.tolerance},
        )
        u_final = np.asarray(result.x, dtype=float)
        f_final = problem.value(u_final)
        x_final = problem.to_coords(u_final)
    except DegenerateConfigurationError as e:
        logger.debug("refinement hit a degenerate configuration: %s", e)
        return j1.copy(), j2.copy(), RefineDiagnostics(
            f0, f0, f0, f0, 0, fallback=True, message=str(e)
        )

    if not f_final <= f0:
        return j1.copy(), j2.copy(), RefineDiagnostics(
            f0, f0, f0, f0, int(result.nit), fallback=True, message="no decrease"
        )
    gaps = problem.rotation_gap(np.vstack([problem.x0, x_final]))
    y1, y2 = problem.unpack(x_final[None, :])
    return y1[0], y2[0], RefineDiagnostics(
        initial_objective=f0,
        final_objective=f_final,
        initial_rotation_gap=float(gaps[0]),
        final_rotation_gap=float(gaps[1]),
        iterations=int(result.nit),
        message=str(result.message),
    )


def combine_pseudo(
    abm: JointPair,
    rgr: JointPair,
    alpha: float,
    diagnostics: Optional[RefineDiagnostics] = None,
) -> PseudoLabelPair:
    """``alpha * abm + (1 - alpha) * rgr`` for each view.

    Raises:
        InvalidParameterError: if ``alpha`` lies outside ``[0, 1]``.
    """
    if not 0.0 <= alpha <= 1.0:
        raise InvalidParameterError(f"alpha must be in [0, 1], got {alpha}")
    if alpha == 1.0:
        provenance = "abm-only"
    elif alpha == 0.0:
        provenance = "rgr-only"
    else:
        provenance = "fused"
    y1 = alpha * np.asarray(abm[0]) + (1.0 - alpha) * np.asarray(rgr[0])
    y2 = alpha * np.asarray(abm[1]) + (1.0 - alpha) * np.asarray(rgr[1])
    return PseudoLabelPair(v1=y1, v2=y2, provenance=provenance, diagnostics=diagnostics)


@dataclass(frozen=True)
class RotationUpdate:
    """Outcome of one rolling rotation update."""

    rotation: np.ndarray
    used_pairs: int
    skipped_pairs: int


def update_rotation(
    r_prev: np.ndarray, batch_preds: Sequence[JointPair], eta_r: float
) -> RotationUpdate:
    """Blend the batch mean rotation into the running estimate.

    The batch mean is the chordal mean of per-pair Kabsch rotations; the blend
    is the chordal mean of ``(r_prev, batch_mean)`` with weights
    ``(eta_r, 1 - eta_r)``, so the result stays a rotation.
    """
    if not batch_preds:
        raise InvalidInputError("update_rotation needs a non-empty batch")
    if not 0.0 <= eta_r <= 1.0:
        raise InvalidParameterError(f"eta_r must be in [0, 1], got {eta_r}")
    rotations: List[np.ndarray] = []
    for j1, j2 in batch_preds:
        try:
            rotations.append(kabsch_rotation(j1, j2))
        except DegenerateConfigurationError:
            continue
    skipped = len(batch_preds) - len(rotations)
    if not rotations:
        logger.warning("every pair in the batch was degenerate; rotation left unchanged")
        return RotationUpdate(np.asarray(r_prev, dtype=float).copy(), 0, skipped)
    batch_mean = so3_mean(rotations)
    blended = so3_mean([r_prev, batch_mean], [eta_r, 1.0 - eta_r])
    return RotationUpdate(blended, len(rotations), skipped)


@dataclass(frozen=True)
class PseudoLabelResult:
    """Pseudo-labels for one sample plus the ABM-only variant when computed."""

    labels: PseudoLabelPair
    abm: Optional[JointPair] = None


def generate_pseudo_labels(
    j1: np.ndarray,
    j2: np.ndarray,
    h1: HeatmapStack,
    h2: HeatmapStack,
    rotation: np.ndarray,
    config: AdaptationConfig,
) -> PseudoLabelResult:
    """Full pipeline for one wrist-aligned momentum prediction pair.

    attention -> ABM -> RGR -> fusion, with the pieces the configured mode
    leaves out skipped.
    """
    mode = config.mode
    if mode == "self":
        return PseudoLabelResult(PseudoLabelPair(v1=j1.copy(), v2=j2.copy(), provenance="self"))

    abm = None
    if mode in ("full", "abm-only"):
        weights = joint_attention(h1, h2, config.beta)
        abm = abm_merge(j1, j2, weights, rotation)
        if mode == "abm-only":
            return PseudoLabelResult(combine_pseudo(abm, abm, 1.0), abm=abm)

    y1, y2, diagnostics = rgr_refine(j1, j2, rotation, config.refine)
    if mode == "rgr-only":
        return PseudoLabelResult(combine_pseudo((y1, y2), (y1, y2), 0.0, diagnostics))
    assert abm is not None
    return PseudoLabelResult(combine_pseudo(abm, (y1, y2), config.alpha, diagnostics), abm=abm)
