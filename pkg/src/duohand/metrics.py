"""Evaluation metrics for duohand."""

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import TYPE_CHECKING, Any, Dict, List, Optional, Sequence

import numpy as np

from .errors import DegenerateConfigurationError, InvalidInputError
from .geometry import as_joint_set, cross_covariance, kabsch_from_covariance, wrist_align

if TYPE_CHECKING:
    from .config import AdaptationConfig
    from .estimators import BaseEstimator, EstimatorParams
    from .scene import DualViewDataset

logger = logging.getLogger(__name__)

NUM_BUCKETS = 7
DUAL_M_FRAMES = ("both", "view1", "view2")


def mpjpe(pred: np.ndarray, gt: np.ndarray) -> float:
    """Root-relative mean per joint position error in mm."""
    diff = wrist_align(pred) - wrist_align(gt)
    return float(np.mean(np.linalg.norm(diff, axis=-1)))


def _per_sample_mpjpe(pred: np.ndarray, gt: np.ndarray) -> np.ndarray:
    # (n, 21, 3) stacks -> (n,)
    diff = wrist_align(pred) - wrist_align(gt)
    return np.linalg.norm(diff, axis=-1).mean(axis=-1)


def _as_views(preds: Sequence[np.ndarray], gts: Sequence[np.ndarray]):
    if len(preds) != 2 or len(gts) != 2:
        raise InvalidInputError("expected predictions and ground truth for two views")
    p = [as_joint_set(np.asarray(x)).reshape(-1, 21, 3) for x in preds]
    g = [as_joint_set(np.asarray(x)).reshape(-1, 21, 3) for x in gts]
    if not p[0].shape == p[1].shape == g[0].shape == g[1].shape:
        raise InvalidInputError("views must hold the same number of samples")
    return p, g


def mono_m(preds: Sequence[np.ndarray], gts: Sequence[np.ndarray]) -> float:
    """MPJPE pooled over every (view, sample) pair.

    Args:
        preds: ``(view1, view2)`` predictions, each ``(n, 21, 3)``.
        gts: Ground truth in the same layout.
    """
    p, g = _as_views(preds, gts)
    if p[0].shape[0] == 0:
        return math.nan
    errors = np.concatenate([_per_sample_mpjpe(p[v], g[v]) for v in range(2)])
    return float(errors.mean())


def fuse_views(j1: np.ndarray, j2: np.ndarray, r: np.ndarray):
    """Average both views in each view's frame, after wrist alignment.

    Returns:
        ``(fused_in_view1, fused_in_view2)``.
    """
    a1 = wrist_align(j1)
    a2 = wrist_align(j2)
    r = np.asarray(r, dtype=float)
    return 0.5 * (a1 + a2 @ r), 0.5 * (a1 @ r.T + a2)


def dual_m(
    preds: Sequence[np.ndarray], gts: Sequence[np.ndarray], r: np.ndarray, frame: str = "both"
) -> float:
    """MPJPE of the rotation-fused predictions.

    Args:
        preds: ``(view1, view2)`` predictions, each ``(n, 21, 3)``.
        gts: Ground truth in the same layout.
        r: Rotation from view1 to view2 coordinates.
        frame: ``both`` pools the fused errors of both frames; ``view1`` or
            ``view2`` evaluates in a single frame.
    """
    if frame not in DUAL_M_FRAMES:
        raise InvalidInputError(f"frame must be one of {', '.join(DUAL_M_FRAMES)}")
    p, g = _as_views(preds, gts)
    if p[0].shape[0] == 0:
        return math.nan
    f1, f2 = fuse_views(p[0], p[1], r)
    e1 = _per_sample_mpjpe(f1, g[0])
    e2 = _per_sample_mpjpe(f2, g[1])
    if frame == "view1":
        return float(e1.mean())
    if frame == "view2":
        return float(e2.mean())
    return float(np.concatenate([e1, e2]).mean())


def pair_rotation_error(preds: Sequence[np.ndarray], r: np.ndarray) -> float:
    """Mean angle in degrees between each pair's own rotation and ``r``.

    Each pair's rotation is the Kabsch rotation taking its view1 prediction
    onto its view2 prediction, so this measures how consistent the two views
    are with the camera geometry.
    """
    p, _ = _as_views(preds, preds)
    if p[0].shape[0] == 0:
        return math.nan
    rotations = kabsch_from_covariance(cross_covariance(p[0], p[1]))
    rel = np.einsum("nji,jk->nik", rotations, np.asarray(r, dtype=float))
    cos = np.clip((np.trace(rel, axis1=1, axis2=2) - 1.0) / 2.0, -1.0, 1.0)
    return float(np.degrees(np.arccos(cos)).mean())


@dataclass
class Bucket:
    """One error interval of the complementarity table."""

    lower: float
    upper: float
    count: int = 0
    fused_error: Optional[float] = None
    abm_error: Optional[float] = None


def bucket_bounds(low: float, high: float, buckets: int = NUM_BUCKETS) -> List[float]:
    """Edges of ``buckets`` equal-width intervals spanning ``[low, high]``."""
    return [float(x) for x in np.linspace(low, high, buckets + 1)]


def complementarity_table(
    prediction_errors: Sequence[float],
    fused_errors: Sequence[float],
    abm_errors: Sequence[float],
    buckets: int = NUM_BUCKETS,
) -> List[Bucket]:
    """Mean pseudo-label error with and without refinement per prediction-error bucket.

    Intervals are half-open except the last, which also holds the maximum.
    """
    pred = np.asarray(prediction_errors, dtype=float)
    fused = np.asarray(fused_errors, dtype=float)
    abm = np.asarray(abm_errors, dtype=float)
    if not pred.shape == fused.shape == abm.shape:
        raise InvalidInputError("error sequences must have equal length")
    if pred.size == 0:
        return []
    if np.unique(pred).size < buckets:
        logger.warning(
            "only %d distinct prediction errors for %d buckets; some buckets stay empty",
            np.unique(pred).size,
            buckets,
        )
    edges = bucket_bounds(float(pred.min()), float(pred.max()), buckets)
    if edges[-1] > edges[0]:
        index = np.clip(np.searchsorted(edges, pred, side="right") - 1, 0, buckets - 1)
    else:
        index = np.zeros(pred.size, dtype=int)
    table = []
    for b in range(buckets):
        mask = index == b
        count = int(mask.sum())
        table.append(
            Bucket(
                lower=edges[b],
                upper=edges[b + 1],
                count=count,
                fused_error=float(fused[mask].mean()) if count else None,
                abm_error=float(abm[mask].mean()) if count else None,
            )
        )
    return table


def relative_improvement(baseline: float, adapted: float) -> float:
    """Percent reduction of an error relative to the baseline."""
    if baseline == 0 or not math.isfinite(baseline):
        return math.nan
    return 100.0 * (baseline - adapted) / baseline


@dataclass
class EvalReport:
    """Metrics of one parameter set on one dataset."""

    mono_m: float
    dual_m: float
    view1_mpjpe: float
    view2_mpjpe: float
    count: int
    complementarity: List[Bucket] = field(default_factory=list)
    pair_rotation_error_deg: Optional[float] = None

    def to_dict(self) -> Dict[str, Any]:
        return {
            "mono_m": self.mono_m,
            "dual_m": self.dual_m,
            "view1_mpjpe": self.view1_mpjpe,
            "view2_mpjpe": self.view2_mpjpe,
            "count": self.count,
            "pair_rotation_error_deg": self.pair_rotation_error_deg,
            "complementarity": [asdict(b) for b in self.complementarity],
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "EvalReport":
        return cls(
            mono_m=float(data["mono_m"]),
            dual_m=float(data["dual_m"]),
            view1_mpjpe=float(data["view1_mpjpe"]),
            view2_mpjpe=float(data["view2_mpjpe"]),
            count=int(data["count"]),
            pair_rotation_error_deg=data.get("pair_rotation_error_deg"),
            complementarity=[Bucket(**b) for b in data.get("complementarity", [])],
        )

    def to_markdown(self) -> str:
        lines = [
            "| Metric | mm |",
            "|---|---|",
            f"| Mono-M | {self.mono_m:.2f} |",
            f"| Dual-M | {self.dual_m:.2f} |",
            f"| view1 MPJPE | {self.view1_mpjpe:.2f} |",
            f"| view2 MPJPE | {self.view2_mpjpe:.2f} |",
            "",
            f"Samples: {self.count}",
        ]
        if self.pair_rotation_error_deg is not None:
            lines.append(f"Pair rotation error: {self.pair_rotation_error_deg:.2f} deg")
        if self.complementarity:
            lines += [
                "",
                "| Prediction error (mm) | Count | Fused (mm) | ABM only (mm) |",
                "|---|---|---|---|",
            ]
            for b in self.complementarity:
                fused = "-" if b.fused_error is None else f"{b.fused_error:.2f}"
                abm = "-" if b.abm_error is None else f"{b.abm_error:.2f}"
                lines.append(f"| [{b.lower:.1f}, {b.upper:.1f}) | {b.count} | {fused} | {abm} |")
        return "\n".join(lines) + "\n"


def _require_ground_truth(samples: Sequence[Any]) -> None:
    if any(s.gt is None for s in samples):
        raise InvalidInputError("evaluation needs ground truth for every sample")


def evaluate(
    estimator: "BaseEstimator",
    params: "EstimatorParams",
    dataset: "DualViewDataset",
    rotation: np.ndarray,
    complementarity: Optional[List[Bucket]] = None,
) -> EvalReport:
    """Mono-M, Dual-M and per-view MPJPE of ``params`` on ``dataset``.

    When the dataset knows its camera rotation the report also carries the
    pair rotation error against it.

    Raises:
        InvalidInputError: if any sample lacks ground truth.
    """
    _require_ground_truth(dataset.samples)
    preds = estimator.predict_batch(params, dataset.samples)
    n = len(preds)
    p1 = np.array([p[0].joints for p in preds]).reshape(n, 21, 3)
    p2 = np.array([p[1].joints for p in preds]).reshape(n, 21, 3)
    g1 = np.array([s.gt[0] for s in dataset.samples]).reshape(n, 21, 3)
    g2 = np.array([s.gt[1] for s in dataset.samples]).reshape(n, 21, 3)
    v1 = float(_per_sample_mpjpe(p1, g1).mean()) if n else math.nan
    v2 = float(_per_sample_mpjpe(p2, g2).mean()) if n else math.nan
    pair_error = None
    if n and dataset.r_gt is not None:
        try:
            pair_error = pair_rotation_error((p1, p2), dataset.r_gt)
        except DegenerateConfigurationError as e:
            logger.warning("pair rotation error skipped: %s", e)
    report = EvalReport(
        mono_m=mono_m((p1, p2), (g1, g2)),
        dual_m=dual_m((p1, p2), (g1, g2), rotation),
        view1_mpjpe=v1,
        view2_mpjpe=v2,
        count=n,
        complementarity=complementarity or [],
        pair_rotation_error_deg=pair_error,
    )
    if n and report.dual_m > max(v1, v2):
        logger.warning(
            "Dual-M %.2f mm exceeds both single-view errors (%.2f, %.2f)", report.dual_m, v1, v2
        )
    return report


def complementarity_analysis(
    estimator: "BaseEstimator",
    params: "EstimatorParams",
    dataset: "DualViewDataset",
    rotation: np.ndarray,
    config: "AdaptationConfig",
    limit: Optional[int] = None,
    buckets: int = NUM_BUCKETS,
) -> List[Bucket]:
    """Bucket samples by prediction error and compare fused with ABM-only labels.

    Pseudo-labels are generated by the full pipeline from ``params`` and
    ``rotation``; errors of both views are averaged per sample.
    """
    from .pseudolabel import generate_pseudo_labels

    config = config.replace(mode="full")
    samples = dataset.samples if limit is None else dataset.samples[:limit]
    _require_ground_truth(samples)
    pred_err, fused_err, abm_err = [], [], []
    for sample in samples:
        p1, p2 = estimator.predict_pair(params, sample)
        result = generate_pseudo_labels(
            wrist_align(p1.joints),
            wrist_align(p2.joints),
            p1.heatmaps,
            p2.heatmaps,
            rotation,
            config,
        )
        assert result.abm is not None
        gt1, gt2 = sample.gt
        pred_err.append(0.5 * (mpjpe(p1.joints, gt1) + mpjpe(p2.joints, gt2)))
        fused_err.append(0.5 * (mpjpe(result.labels.v1, gt1) + mpjpe(result.labels.v2, gt2)))
        abm_err.append(0.5 * (mpjpe(result.abm[0], gt1) + mpjpe(result.abm[1], gt2)))
    return complementarity_table(pred_err, fused_err, abm_err, buckets=buckets)
