"""Single-to-dual-view adaptation loop for duohand.

One iteration, in order: the momentum estimator predicts both views, the
pseudo-label pipeline turns those predictions into targets, the live
estimator takes a gradient step towards the targets, the momentum copy is
averaged towards the live one, and the inter-view rotation is blended with
the batch's rotation estimate.
"""

import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .config import AdaptationConfig, config_hash, parse_adaptation
from .container import CHECKPOINT_MAGIC, read_container, write_container
from .errors import (
    DegenerateConfigurationError,
    FormatError,
    IncompatibleCheckpointError,
    InitializationError,
    InvalidParameterError,
    NonFiniteLossError,
)
from .estimators import BaseEstimator, EstimatorParams, MomentumState, momentum_update
from .geometry import geodesic_angle, kabsch_rotation, so3_mean, wrist_align
from .metrics import EvalReport, evaluate, mpjpe
from .pseudolabel import PseudoLabelResult, generate_pseudo_labels, update_rotation
from .scene import DualViewDataset, DualViewSample

logger = logging.getLogger(__name__)


def initialize_rotation(
    estimator: BaseEstimator, params: EstimatorParams, dataset: DualViewDataset, n: int
) -> np.ndarray:
    """Chordal mean of per-pair Kabsch rotations over the first ``n`` samples.

    Degenerate pairs are skipped. If the dataset holds fewer than ``n``
    samples all of them are used.

    Raises:
        InitializationError: if no usable pair is found.
    """
    if n > len(dataset):
        logger.warning(
            "dataset has %d samples, fewer than the %d requested for initialization",
            len(dataset),
            n,
        )
        n = len(dataset)
    rotations = []
    for sample in dataset.samples[:n]:
        p1, p2 = estimator.predict_pair(params, sample)
        try:
            rotations.append(kabsch_rotation(p1.joints, p2.joints))
        except DegenerateConfigurationError:
            continue
    skipped = n - len(rotations)
    if skipped:
        logger.info("skipped %d degenerate pairs during rotation initialization", skipped)
    if not rotations:
        raise InitializationError(f"all {n} initialization pairs are degenerate")
    return so3_mean(rotations)


@dataclass
class AdaptState:
    """Everything the loop carries from one iteration to the next.

    Attributes:
        params: Live estimator parameters ``theta``.
        momentum: Momentum copy ``theta_bar`` and the step counter ``T``.
        velocity: Heavy-ball velocity of the optimizer.
        rotation: Current inter-view rotation estimate.
        initial_rotation: The rotation produced by initialization.
        config: Configuration the run was started with.
        template_hash: Hand template of the dataset being adapted to.
        events: Records of the iterations run in this process.
    """

    params: EstimatorParams
    momentum: MomentumState
    velocity: EstimatorParams
    rotation: np.ndarray
    initial_rotation: np.ndarray
    config: AdaptationConfig
    template_hash: str
    events: List[Dict[str, Any]] = field(default_factory=list)

    @property
    def step(self) -> int:
        return self.momentum.step

    def summary(self) -> Dict[str, Any]:
        """Small plain-data dump, used in error reports."""
        return {
            "step": self.step,
            "rotation": self.rotation.tolist(),
            "params_finite": self.params.is_finite(),
            "config_hash": config_hash(self.config),
        }


def initial_state(
    estimator: BaseEstimator,
    dataset: DualViewDataset,
    config: AdaptationConfig,
    params: Optional[EstimatorParams] = None,
    rotation: Optional[np.ndarray] = None,
) -> AdaptState:
    """State before the first iteration; initializes the rotation if absent."""
    params = params if params is not None else estimator.initial_params()
    if rotation is None:
        rotation = initialize_rotation(estimator, params, dataset, config.init_pairs)
    return AdaptState(
        params=params.copy(),
        momentum=MomentumState(params=params.copy(), eta=config.eta_theta),
        velocity=EstimatorParams.zeros(),
        rotation=np.array(rotation, dtype=float),
        initial_rotation=np.array(rotation, dtype=float),
        config=config,
        template_hash=dataset.template_hash,
    )


class Adapter:
    """Runs the adaptation loop over one dataset.

    Batches are drawn from a per-epoch permutation seeded with
    ``(config.seed, epoch)``; the batch of step ``T`` depends only on ``T``,
    so a resumed run continues exactly where the interrupted one stopped.
    """

    def __init__(
        self,
        estimator: BaseEstimator,
        dataset: DualViewDataset,
        config: AdaptationConfig,
        state: Optional[AdaptState] = None,
        event_log: Optional[Path] = None,
    ):
        if len(dataset) == 0:
            raise InitializationError("cannot adapt on an empty dataset")
        self.estimator = estimator
        self.dataset = dataset
        self.config = config
        self.state = state if state is not None else initial_state(estimator, dataset, config)
        self.event_log = Path(event_log) if event_log is not None else None

    @property
    def batches_per_epoch(self) -> int:
        return math.ceil(len(self.dataset) / self.config.batch_size)

    @property
    def total_steps(self) -> int:
        return self.config.epochs * self.batches_per_epoch

    def batch_indices(self, step: int) -> np.ndarray:
        epoch, k = divmod(step, self.batches_per_epoch)
        order = np.random.default_rng([self.config.seed, epoch]).permutation(len(self.dataset))
        b = self.config.batch_size
        # the last batch of an epoch may be partial
        return order[k * b : (k + 1) * b]

    def _pseudo_labels(
        self, samples: Sequence[DualViewSample]
    ) -> Tuple[List[Tuple[np.ndarray, np.ndarray]], List[PseudoLabelResult]]:
        state = self.state
        preds = [self.estimator.predict_pair(state.momentum.params, s) for s in samples]
        aligned = [(wrist_align(p1.joints), wrist_align(p2.joints)) for p1, p2 in preds]

        def label(i: int) -> PseudoLabelResult:
            (j1, j2), (p1, p2) = aligned[i], preds[i]
            return generate_pseudo_labels(j1, j2, p1.heatmaps, p2.heatmaps, state.rotation, self.config)

        indices = range(len(samples))
        if self.config.workers > 1:
            # map() yields in submission order
            with ThreadPoolExecutor(max_workers=self.config.workers) as pool:
                results = list(pool.map(label, indices))
        else:
            results = [label(i) for i in indices]
        return aligned, results

    def step(self) -> Dict[str, Any]:
        """Run one iteration and return its event record."""
        state = self.state
        cfg = self.config
        t = state.step
        samples = [self.dataset.samples[i] for i in self.batch_indices(t)]

        aligned, results = self._pseudo_labels(samples)
        targets = [r.labels.as_tuple() for r in results]

        loss, grad = self.estimator.batch_loss_gradient(state.params, samples, targets)
        if not math.isfinite(loss) or not grad.is_finite():
            raise NonFiniteLossError(f"non-finite loss at step {t}", state=state.summary())

        velocity = cfg.optimizer_momentum * state.velocity + grad
        update = EstimatorParams(
            offsets=cfg.learning_rate * velocity.offsets,
            gains=cfg.learning_rate * cfg.gain_lr_scale * velocity.gains,
        )
        params = (state.params - update).clip_gains()
        momentum = momentum_update(state.momentum, params)
        rot_update = update_rotation(state.rotation, aligned, cfg.eta_r)

        event = self._event(t, loss, samples, results, state.rotation, rot_update.rotation)
        event["skipped_pairs"] = rot_update.skipped_pairs

        state.params = params
        state.velocity = velocity
        state.momentum = momentum
        state.rotation = rot_update.rotation
        state.events.append(event)
        self._write_event(event)
        return event

    def _event(
        self,
        t: int,
        loss: float,
        samples: Sequence[DualViewSample],
        results: Sequence[PseudoLabelResult],
        r_prev: np.ndarray,
        r_new: np.ndarray,
    ) -> Dict[str, Any]:
        event: Dict[str, Any] = {
            "step": t,
            "epoch": t // self.batches_per_epoch,
            "batch_size": len(samples),
            "loss": float(loss),
            "rotation_drift_deg": math.degrees(geodesic_angle(r_prev, r_new)),
        }
        if self.dataset.r_gt is not None:
            event["rotation_error_deg"] = math.degrees(geodesic_angle(r_new, self.dataset.r_gt))
        labeled = [(r, s.gt) for r, s in zip(results, samples) if s.gt is not None]
        if labeled:
            errors = [0.5 * (mpjpe(r.labels.v1, gt[0]) + mpjpe(r.labels.v2, gt[1])) for r, gt in labeled]
            event["pseudo_label_error_mm"] = float(np.mean(errors))
        diagnostics = [r.labels.diagnostics for r in results if r.labels.diagnostics is not None]
        if diagnostics:
            event["refine_fallbacks"] = sum(d.fallback for d in diagnostics)
            event["refine_iterations"] = float(np.mean([d.iterations for d in diagnostics]))
        return event

    def _write_event(self, event: Dict[str, Any]) -> None:
        if self.event_log is None:
            return
        self.event_log.parent.mkdir(parents=True, exist_ok=True)
        with open(self.event_log, "a") as f:
            f.write(json.dumps(event, sort_keys=True) + "\n")

    def run(self, steps: Optional[int] = None) -> AdaptState:
        """Iterate until the configured epochs are done, or ``steps`` more times."""
        if steps is None:
            steps = max(0, self.total_steps - self.state.step)
        for _ in range(steps):
            event = self.step()
            logger.debug("step %d loss %.6g", event["step"], event["loss"])
        logger.info("adaptation stopped at step %d", self.state.step)
        return self.state


def adapt(
    estimator: BaseEstimator,
    dataset: DualViewDataset,
    config: AdaptationConfig,
    params: Optional[EstimatorParams] = None,
    rotation: Optional[np.ndarray] = None,
    event_log: Optional[Path] = None,
) -> AdaptState:
    """Adapt ``estimator`` to ``dataset`` and return the final state."""
    state = initial_state(estimator, dataset, config, params=params, rotation=rotation)
    return Adapter(estimator, dataset, config, state=state, event_log=event_log).run()


def adapt_on_subset(
    estimator: BaseEstimator, dataset: DualViewDataset, config: AdaptationConfig, n: int
) -> Tuple[AdaptState, EvalReport]:
    """Adapt on the first ``n`` samples and evaluate on the whole dataset.

    The rotation is initialised from the same ``n`` samples, and Dual-M is
    fused with that initial rotation.

    Raises:
        InvalidParameterError: if ``n`` is below one.
    """
    if n < 1:
        raise InvalidParameterError(f"sample count must be >= 1, got {n}")
    state = adapt(estimator, dataset.subset(n), config.replace(init_pairs=n))
    report = evaluate(estimator, state.params, dataset, state.initial_rotation)
    logger.info("N=%d: Dual-M %.2f mm, Mono-M %.2f mm", n, report.dual_m, report.mono_m)
    return state, report


def checkpoint(state: AdaptState, path: Path) -> str:
    """Write the state to a checkpoint container.

    The event log is not part of the checkpoint.

    Returns:
        The sha256 of the written file.
    """
    header = {
        "kind": "checkpoint",
        "step": state.step,
        "config_hash": config_hash(state.config),
        "template_hash": state.template_hash,
        "config": state.config.to_dict(),
    }
    arrays = {
        "params_offsets": state.params.offsets,
        "params_gains": state.params.gains,
        "momentum_offsets": state.momentum.params.offsets,
        "momentum_gains": state.momentum.params.gains,
        "velocity_offsets": state.velocity.offsets,
        "velocity_gains": state.velocity.gains,
        "rotation": state.rotation,
        "initial_rotation": state.initial_rotation,
    }
    return write_container(Path(path), CHECKPOINT_MAGIC, header, arrays)


def resume(path: Path, config: Optional[AdaptationConfig] = None) -> AdaptState:
    """Load a checkpoint.

    Args:
        path: Checkpoint file.
        config: The configuration the caller intends to continue with. When
            given, it must hash to the checkpoint's config hash.

    Raises:
        IncompatibleCheckpointError: on a config hash mismatch.
    """
    header, arrays = read_container(Path(path), CHECKPOINT_MAGIC)
    if header.get("kind") != "checkpoint":
        raise FormatError(f"{path} is not a checkpoint container")
    stored = parse_adaptation(header["config"])
    if config is not None and config_hash(config) != header["config_hash"]:
        raise IncompatibleCheckpointError(
            f"checkpoint {path} was written with config {header['config_hash'][:12]}, "
            f"got {config_hash(config)[:12]}"
        )
    config = config if config is not None else stored
    return AdaptState(
        params=EstimatorParams(arrays["params_offsets"], arrays["params_gains"]),
        momentum=MomentumState(
            params=EstimatorParams(arrays["momentum_offsets"], arrays["momentum_gains"]),
            eta=config.eta_theta,
            step=int(header["step"]),
        ),
        velocity=EstimatorParams(arrays["velocity_offsets"], arrays["velocity_gains"]),
        rotation=arrays["rotation"],
        initial_rotation=arrays["initial_rotation"],
        config=config,
        template_hash=str(header["template_hash"]),
    )
