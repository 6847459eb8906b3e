"""Synthetic dual-view world.

Stands in for real cameras and images: hand poses are sampled from a template,
seen by two cameras related by a hidden rotation, and every view gets a
corrupted "raw estimate" plus heatmaps whose peak drops with the joint error.
"""

import hashlib
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import yaml
from scipy.spatial.transform import Rotation

from .config import LiftingFailureConfig, OcclusionConfig, SceneConfig, ViewCorruptionConfig
from .container import DATASET_MAGIC, FORMAT_VERSION, read_container, write_container
from .errors import FormatError, InvalidInputError
from .geometry import NUM_JOINTS, as_joint_set, wrist_align

logger = logging.getLogger(__name__)

HEATMAP_SIZE = 32
HEATMAP_STD_PX = 1.5
# mm per heatmap pixel when placing peaks around the wrist
_PIXEL_MM = 14.0

# wrist, thumb (1-4), index (5-8), middle (9-12), ring (13-16), little (17-20)
_TEMPLATE_JOINTS = np.array(
    [
        [0.0, 0.0, 0.0],
        [20.0, 20.0, -10.0],
        [40.0, 45.0, -15.0],
        [55.0, 65.0, -18.0],
        [65.0, 85.0, -20.0],
        [25.0, 90.0, 0.0],
        [28.0, 130.0, 0.0],
        [30.0, 155.0, 0.0],
        [31.0, 175.0, 0.0],
        [5.0, 95.0, 0.0],
        [5.0, 140.0, 0.0],
        [5.0, 168.0, 0.0],
        [5.0, 190.0, 0.0],
        [-15.0, 88.0, 0.0],
        [-18.0, 128.0, 0.0],
        [-20.0, 153.0, 0.0],
        [-21.0, 173.0, 0.0],
        [-33.0, 78.0, 0.0],
        [-38.0, 108.0, 0.0],
        [-41.0, 126.0, 0.0],
        [-43.0, 143.0, 0.0],
    ]
)
_TEMPLATE_PARENTS = (-1, 0, 1, 2, 3, 0, 5, 6, 7, 0, 9, 10, 11, 0, 13, 14, 15, 0, 17, 18, 19)


@dataclass(frozen=True)
class HandTemplate:
    """Neutral hand: 21 joints and the parent of each (``-1`` for the wrist)."""

    joints: np.ndarray = field(default_factory=lambda: _TEMPLATE_JOINTS.copy())
    parents: Tuple[int, ...] = _TEMPLATE_PARENTS

    def __post_init__(self) -> None:
        joints = as_joint_set(self.joints)
        if len(self.parents) != NUM_JOINTS or self.parents[0] != -1:
            raise InvalidInputError("template needs 21 parents with the wrist as root")
        for child, parent in enumerate(self.parents[1:], start=1):
            # parents precede children, so the graph is a tree rooted at the wrist
            if not 0 <= parent < child:
                raise InvalidInputError(f"joint {child} has invalid parent {parent}")
        lengths = np.linalg.norm(joints[1:] - joints[list(self.parents[1:])], axis=1)
        if np.any(lengths < 15.0) or np.any(lengths > 110.0):
            raise InvalidInputError("bone lengths must lie in [15, 110] mm")

    @property
    def bones(self) -> List[Tuple[int, int]]:
        """The 20 (parent, child) pairs."""
        return [(p, c) for c, p in enumerate(self.parents) if p >= 0]

    def bone_lengths(self, joints: Optional[np.ndarray] = None) -> np.ndarray:
        """Bone lengths of ``joints`` (the template itself by default)."""
        j = self.joints if joints is None else np.asarray(joints, dtype=float)
        parents = [p for p, _ in self.bones]
        children = [c for _, c in self.bones]
        return np.linalg.norm(j[children] - j[parents], axis=1)


def template_hash(template: HandTemplate) -> str:
    """Identify a template by its joints and tree."""
    digest = hashlib.sha256()
    digest.update(np.ascontiguousarray(template.joints, dtype="<f8").tobytes())
    digest.update(np.asarray(template.parents, dtype="<i8").tobytes())
    return digest.hexdigest()[:16]


@dataclass(frozen=True)
class CorruptionModel:
    """How one view's raw estimates deviate from the truth.

    Attributes:
        bias: Constant per-joint offset (21x3, mm), drawn once per dataset.
        noise_sigma: Isotropic Gaussian noise (mm) at full visibility.
        visibility: In (0, 1], either one value or one per joint; the noise
            std is ``noise_sigma / visibility``.
        sigma_conf: Decay constant (mm) of heatmap confidence with error.
        bias_scale: Half-width of the uniform draw that produced ``bias``.
        occluded: Joints this view hides from its camera, if any.
    """

    bias: np.ndarray
    noise_sigma: float = 8.0
    visibility: Union[float, np.ndarray] = 1.0
    sigma_conf: float = 30.0
    bias_scale: float = 15.0
    occluded: Optional[np.ndarray] = None

    def __post_init__(self) -> None:
        if np.asarray(self.bias).shape != (NUM_JOINTS, 3):
            raise InvalidInputError("bias must be a 21x3 field")
        if self.noise_sigma < 0:
            raise InvalidInputError("noise_sigma must be >= 0")
        visibility = np.asarray(self.visibility, dtype=float)
        if visibility.shape not in ((), (NUM_JOINTS,)):
            raise InvalidInputError("visibility must be a scalar or one value per joint")
        if np.any(visibility <= 0.0) or np.any(visibility > 1.0):
            raise InvalidInputError("visibility must lie in (0, 1]")
        if self.occluded is not None and np.asarray(self.occluded).shape != (NUM_JOINTS,):
            raise InvalidInputError("occluded must flag each of the 21 joints")
        if self.sigma_conf <= 0:
            raise InvalidInputError("sigma_conf must be > 0")

    @property
    def noise_std(self) -> Union[float, np.ndarray]:
        if np.ndim(self.visibility) == 0:
            return self.noise_sigma / float(self.visibility)
        return self.noise_sigma / np.asarray(self.visibility, dtype=float)

    @property
    def joint_visibility(self) -> np.ndarray:
        """Visibility of each of the 21 joints."""
        return np.broadcast_to(np.asarray(self.visibility, dtype=float), (NUM_JOINTS,)).copy()

    @property
    def occluded_joints(self) -> np.ndarray:
        """Boolean mask of hidden joints (all False without occlusion)."""
        if self.occluded is None:
            return np.zeros(NUM_JOINTS, dtype=bool)
        return np.asarray(self.occluded, dtype=bool)

    @classmethod
    def clean(cls) -> "CorruptionModel":
        """No bias, no noise."""
        return cls(bias=np.zeros((NUM_JOINTS, 3)), noise_sigma=0.0, bias_scale=0.0)


def draw_occlusion(occlusion: OcclusionConfig, rng: np.random.Generator) -> np.ndarray:
    """Split the occluded non-wrist joints between the two views.

    Returns:
        A ``(2, 21)`` boolean mask; no joint is hidden in both views and the
        wrist is never hidden.
    """
    chosen = 1 + rng.permutation(NUM_JOINTS - 1)[: int(round(occlusion.fraction * (NUM_JOINTS - 1)))]
    hidden = np.zeros((2, NUM_JOINTS), dtype=bool)
    hidden[0, chosen[::2]] = True
    hidden[1, chosen[1::2]] = True
    return hidden


def draw_corruption(
    view: ViewCorruptionConfig,
    rng: np.random.Generator,
    hidden: Optional[np.ndarray] = None,
    occlusion: Optional[OcclusionConfig] = None,
) -> CorruptionModel:
    """Draw a bias field for one view from its config.

    Joints flagged in ``hidden`` get the occlusion's extra bias and reduced
    visibility on top of the view's own corruption.
    """
    bias = rng.uniform(-view.bias_scale, view.bias_scale, size=(NUM_JOINTS, 3))
    visibility: Union[float, np.ndarray] = view.visibility
    occluded = None
    if hidden is not None and occlusion is not None:
        occluded = np.asarray(hidden, dtype=bool)
        extra = rng.uniform(-occlusion.bias_scale, occlusion.bias_scale, size=(NUM_JOINTS, 3))
        bias = bias + extra * occluded[:, None]
        if occluded.any():
            visibility = np.where(occluded, occlusion.visibility, view.visibility)
    return CorruptionModel(
        bias=bias,
        noise_sigma=view.noise_sigma,
        visibility=visibility,
        sigma_conf=view.sigma_conf,
        bias_scale=view.bias_scale,
        occluded=occluded,
    )


def synthesize_heatmap(
    joint_error_mm: float,
    peak_location: Tuple[int, int],
    sigma_conf: float,
    spatial_std: float = HEATMAP_STD_PX,
    size: int = HEATMAP_SIZE,
) -> np.ndarray:
    """Render one confidence map.

    A Gaussian bump of spatial std ``spatial_std`` pixels centered on
    ``peak_location`` (row, col), scaled to ``exp(-error / sigma_conf)``.
    """
    if joint_error_mm < 0:
        raise InvalidInputError("joint error must be >= 0")
    peak = float(np.exp(-joint_error_mm / sigma_conf))
    rows = np.arange(size)[:, None] - peak_location[0]
    cols = np.arange(size)[None, :] - peak_location[1]
    bump = np.exp(-(rows**2 + cols**2) / (2.0 * spatial_std**2))
    return np.clip(peak * bump, 0.0, 1.0)


@dataclass(frozen=True)
class HeatmapStack:
    """Per-joint confidence maps of one view.

    Only the peak pixel and value of each joint are stored; the 21x32x32 maps
    are rendered from them on demand. Peaks sit on integer pixels, so each
    map's maximum equals its recorded peak value.
    """

    peaks: np.ndarray
    values: np.ndarray
    spatial_std: float = HEATMAP_STD_PX

    def __post_init__(self) -> None:
        if np.shape(self.peaks) != (NUM_JOINTS, 2):
            raise InvalidInputError("heatmaps need one (row, col) peak per joint")
        values = np.asarray(self.values, dtype=float)
        if values.shape != (NUM_JOINTS,):
            raise InvalidInputError("heatmaps need one peak value per joint")
        if not np.all((values >= 0.0) & (values <= 1.0)):
            raise InvalidInputError("peak values must lie in [0, 1]")

    @property
    def maps(self) -> np.ndarray:
        rows = np.arange(HEATMAP_SIZE)[None, :, None] - self.peaks[:, 0, None, None]
        cols = np.arange(HEATMAP_SIZE)[None, None, :] - self.peaks[:, 1, None, None]
        bump = np.exp(-(rows**2 + cols**2) / (2.0 * self.spatial_std**2))
        return np.clip(self.values[:, None, None] * bump, 0.0, 1.0)

    def peak_values(self) -> np.ndarray:
        """Maximum of each joint's map."""
        return self.maps.max(axis=(1, 2))


def _peak_pixels(raw: np.ndarray) -> np.ndarray:
    rel = wrist_align(raw)[:, :2]
    pix = np.rint(HEATMAP_SIZE / 2 + rel / _PIXEL_MM)
    return np.clip(pix, 0, HEATMAP_SIZE - 1).astype(np.int64)[:, ::-1]


def make_heatmaps(raw: np.ndarray, gt: np.ndarray, corruption: CorruptionModel) -> HeatmapStack:
    """Heatmaps for one view whose peaks follow ``exp(-error / sigma_conf)``."""
    errors = np.linalg.norm(raw - gt, axis=1)
    values = np.clip(np.exp(-errors / corruption.sigma_conf), 0.0, 1.0)
    return HeatmapStack(peaks=_peak_pixels(raw), values=values)


@dataclass(frozen=True)
class CameraRig:
    """Fixed placement of the two cameras.

    ``r_gt`` maps wrist-aligned view1 coordinates to view2 coordinates. It is
    kept for evaluation only; adaptation never reads it.
    """

    r_world_v1: np.ndarray
    r_gt: np.ndarray
    t_v1: np.ndarray
    t_v2: np.ndarray


def make_rig(
    rng: np.random.Generator,
    camera_distance: float = 400.0,
    r_gt: Optional[np.ndarray] = None,
) -> CameraRig:
    """Place two cameras at random orientations looking at the hand."""
    r_world_v1 = Rotation.random(random_state=rng).as_matrix()
    if r_gt is None:
        r_gt = Rotation.random(random_state=rng).as_matrix()
    t_v1 = np.array([0.0, 0.0, camera_distance]) + rng.uniform(-20.0, 20.0, 3)
    t_v2 = np.array([0.0, 0.0, camera_distance]) + rng.uniform(-20.0, 20.0, 3)
    return CameraRig(r_world_v1=r_world_v1, r_gt=np.asarray(r_gt, dtype=float), t_v1=t_v1, t_v2=t_v2)


def sample_pose(
    template: HandTemplate, seed: Any, jitter_deg: float = 15.0, randomize_global: bool = True
) -> np.ndarray:
    """Sample an articulated hand in world coordinates.

    Every bone is turned about its parent joint by a random rotation of at
    most ``jitter_deg``; rotations accumulate down each finger, so bone lengths
    are kept. A random global rotation and translation follow.
    """
    rng = np.random.default_rng(seed)
    offsets = template.joints - template.joints[[max(p, 0) for p in template.parents]]
    pose = np.zeros_like(template.joints)
    frames = np.zeros((NUM_JOINTS, 3, 3))
    frames[0] = np.eye(3)
    limit = np.deg2rad(jitter_deg)
    for child, parent in enumerate(template.parents[1:], start=1):
        axis = rng.normal(size=3)
        axis /= np.linalg.norm(axis)
        angle = rng.uniform(0.0, limit)
        local = Rotation.from_rotvec(axis * angle).as_matrix()
        frames[child] = frames[parent] @ local
        pose[child] = pose[parent] + frames[child] @ offsets[child]
    if randomize_global:
        r_global = Rotation.random(random_state=rng).as_matrix()
        pose = pose @ r_global.T + rng.uniform(-50.0, 50.0, 3)
    return pose


@dataclass(frozen=True)
class DualViewSample:
    """One synchronized pair of views.

    ``gt`` and ``raw`` are ``(2, 21, 3)``: index 0 is view1, index 1 is view2,
    each in its own camera frame. ``gt`` is ``None`` for unlabeled footage;
    ``hard_frame`` marks a frame whose estimates were lifted at a wrong
    orientation.
    """

    sample_id: int
    seed: int
    gt: Optional[np.ndarray]
    raw: np.ndarray
    heatmaps: Tuple[HeatmapStack, HeatmapStack]
    hard_frame: bool = False


def _misorient(joints: np.ndarray, angle_deg: float, rng: np.random.Generator) -> np.ndarray:
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    turn = Rotation.from_rotvec(np.deg2rad(angle_deg) * axis).as_matrix()
    return wrist_align(joints) @ turn.T + joints[0]


def make_sample(
    pose: np.ndarray,
    rig: CameraRig,
    corruption: Sequence[CorruptionModel],
    seed: int,
    sample_id: int = 0,
    failures: Optional[LiftingFailureConfig] = None,
) -> DualViewSample:
    """Observe a world pose from both cameras and corrupt each view.

    Heatmaps are rendered from the detection before any lifting failure, so
    a hard frame looks as confident as its neighbors.
    """
    rng = np.random.default_rng(seed)
    gt1 = np.asarray(pose, dtype=float) @ rig.r_world_v1.T + rig.t_v1
    gt2 = wrist_align(gt1) @ rig.r_gt.T + (rig.r_gt @ gt1[0] + rig.t_v2)
    gt = np.stack([gt1, gt2])
    raw = np.empty_like(gt)
    heatmaps = []
    for v, model in enumerate(corruption):
        std = np.broadcast_to(model.noise_std, (NUM_JOINTS,))[:, None]
        noise = rng.normal(0.0, std, size=(NUM_JOINTS, 3))
        raw[v] = gt[v] + model.bias + noise
        heatmaps.append(make_heatmaps(raw[v], gt[v], model))
    hard_frame = False
    if failures is not None and rng.random() < failures.rate:
        hard_frame = True
        for v in range(2):
            angle = rng.uniform(failures.min_angle_deg, failures.max_angle_deg)
            raw[v] = _misorient(raw[v], angle, rng)
    return DualViewSample(
        sample_id=sample_id,
        seed=int(seed),
        gt=gt,
        raw=raw,
        heatmaps=(heatmaps[0], heatmaps[1]),
        hard_frame=hard_frame,
    )


@dataclass
class DualViewDataset:
    """A list of samples plus the scene they were generated from."""

    samples: List[DualViewSample]
    template: HandTemplate
    rig: Optional[CameraRig]
    corruption: Tuple[CorruptionModel, CorruptionModel]
    seed: int = 0

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def r_gt(self) -> Optional[np.ndarray]:
        return None if self.rig is None else self.rig.r_gt

    @property
    def template_hash(self) -> str:
        return template_hash(self.template)

    def subset(self, count: int) -> "DualViewDataset":
        """The first ``count`` samples over the same scene."""
        return DualViewDataset(self.samples[:count], self.template, self.rig, self.corruption, self.seed)


def sample_seed(dataset_seed: int, index: int) -> int:
    return int(np.random.SeedSequence([dataset_seed, index]).generate_state(1)[0])


def generate_dataset(config: SceneConfig, template: Optional[HandTemplate] = None) -> DualViewDataset:
    """Generate a complete dataset from a scene config."""
    template = template or HandTemplate()
    rng = np.random.default_rng(config.seed)
    r_gt = None
    if config.r_gt_deg is not None:
        r_gt = Rotation.from_rotvec(np.deg2rad(config.r_gt_deg)).as_matrix()
    rig = make_rig(rng, camera_distance=config.camera_distance, r_gt=r_gt)
    hidden = draw_occlusion(config.occlusion, rng)
    corruption = (
        draw_corruption(config.views[0], rng, hidden[0], config.occlusion),
        draw_corruption(config.views[1], rng, hidden[1], config.occlusion),
    )

    samples = []
    for i in range(config.count):
        seed = sample_seed(config.seed, i)
        # the pose stream is derived, so it never replays the noise stream
        pose = sample_pose(template, sample_seed(seed, 0), jitter_deg=config.jitter_deg)
        samples.append(
            make_sample(pose, rig, corruption, seed=seed, sample_id=i, failures=config.failures)
        )
    logger.info(
        "generated %d dual-view samples (seed %d, %d hidden joints, %d hard frames)",
        config.count,
        config.seed,
        int(hidden.sum()),
        sum(s.hard_frame for s in samples),
    )
    return DualViewDataset(samples, template, rig, corruption, seed=config.seed)


def _corruption_array(corruption: Sequence[CorruptionModel]) -> np.ndarray:
    return np.array(
        [[c.noise_sigma, float(np.max(c.joint_visibility)), c.sigma_conf, c.bias_scale] for c in corruption]
    )


def _view_manifest(c: CorruptionModel) -> Dict[str, Any]:
    return {
        "noise_sigma": float(c.noise_sigma),
        "visibility": [float(v) for v in c.joint_visibility] if np.ndim(c.visibility) else float(c.visibility),
        "sigma_conf": float(c.sigma_conf),
        "bias_scale": float(c.bias_scale),
        "occluded_joints": [int(j) for j in np.flatnonzero(c.occluded_joints)],
    }


def write_dataset(dataset: DualViewDataset, path: Path) -> str:
    """Write a dataset container plus a human-readable YAML manifest.

    Ground truth is written only when every sample carries it.

    Returns:
        The sha256 of the dataset file.
    """
    path = Path(path)
    n = len(dataset)
    has_gt = all(s.gt is not None for s in dataset.samples)
    header = {
        "kind": "dataset",
        "count": n,
        "seed": int(dataset.seed),
        "template_hash": dataset.template_hash,
        "template_parents": list(dataset.template.parents),
        "has_rig": dataset.rig is not None,
        "has_gt": has_gt,
        "occluded": [c.occluded is not None for c in dataset.corruption],
    }
    arrays: Dict[str, np.ndarray] = {
        "sample_id": np.array([s.sample_id for s in dataset.samples], dtype=np.int64),
        "sample_seed": np.array([s.seed for s in dataset.samples], dtype=np.int64),
        "hard_frame": np.array([s.hard_frame for s in dataset.samples], dtype=np.int64),
        "raw": np.array([s.raw for s in dataset.samples]).reshape(n, 2, NUM_JOINTS, 3),
        "peaks": np.array(
            [[h.peaks for h in s.heatmaps] for s in dataset.samples], dtype=np.int64
        ).reshape(n, 2, NUM_JOINTS, 2),
        "peak_values": np.array(
            [[h.values for h in s.heatmaps] for s in dataset.samples]
        ).reshape(n, 2, NUM_JOINTS),
        "spatial_std": np.array(
            [[h.spatial_std for h in s.heatmaps] for s in dataset.samples]
        ).reshape(n, 2),
        "template_joints": dataset.template.joints,
        "corruption": _corruption_array(dataset.corruption),
        "visibility": np.stack([c.joint_visibility for c in dataset.corruption]),
        "occluded_joints": np.stack([c.occluded_joints for c in dataset.corruption]).astype(np.int64),
        "bias": np.stack([c.bias for c in dataset.corruption]),
    }
    if has_gt:
        arrays["gt"] = np.array([s.gt for s in dataset.samples]).reshape(n, 2, NUM_JOINTS, 3)
    if dataset.rig is not None:
        arrays.update(
            r_world_v1=dataset.rig.r_world_v1,
            r_gt=dataset.rig.r_gt,
            t_v1=dataset.rig.t_v1,
            t_v2=dataset.rig.t_v2,
        )
    digest = write_container(path, DATASET_MAGIC, header, arrays)

    manifest = {
        "format_version": ".".join(map(str, FORMAT_VERSION)),
        "file": path.name,
        "sha256": digest,
        "count": n,
        "seed": int(dataset.seed),
        "template_hash": dataset.template_hash,
        "hard_frames": int(arrays["hard_frame"].sum()),
        "views": [_view_manifest(c) for c in dataset.corruption],
    }
    with open(path.with_suffix(".yaml"), "w") as f:
        yaml.safe_dump(manifest, f, default_flow_style=False, sort_keys=False)
    return digest


def _read_corruption(header: Dict[str, Any], arrays: Dict[str, np.ndarray], view: int) -> CorruptionModel:
    params = arrays["corruption"]
    occluded = header.get("occluded", [False, False])[view]
    visibility: Union[float, np.ndarray] = float(params[view, 1])
    if "visibility" in arrays and np.ptp(arrays["visibility"][view]) > 0:
        visibility = arrays["visibility"][view]
    return CorruptionModel(
        bias=arrays["bias"][view],
        noise_sigma=float(params[view, 0]),
        visibility=visibility,
        sigma_conf=float(params[view, 2]),
        bias_scale=float(params[view, 3]),
        occluded=arrays["occluded_joints"][view].astype(bool) if occluded else None,
    )


def read_dataset(path: Path) -> DualViewDataset:
    """Read a dataset container written by ``write_dataset``."""
    header, arrays = read_container(Path(path), DATASET_MAGIC)
    if header.get("kind") != "dataset":
        raise FormatError(f"{path} is not a dataset container")
    template = HandTemplate(
        joints=arrays["template_joints"], parents=tuple(header["template_parents"])
    )
    corruption = (_read_corruption(header, arrays, 0), _read_corruption(header, arrays, 1))
    rig = None
    if header["has_rig"]:
        rig = CameraRig(
            r_world_v1=arrays["r_world_v1"],
            r_gt=arrays["r_gt"],
            t_v1=arrays["t_v1"],
            t_v2=arrays["t_v2"],
        )
    has_gt = header.get("has_gt", True)
    hard = arrays.get("hard_frame")
    samples = []
    for i in range(header["count"]):
        heatmaps = tuple(
            HeatmapStack(
                peaks=arrays["peaks"][i, v],
                values=arrays["peak_values"][i, v],
                spatial_std=float(arrays["spatial_std"][i, v]),
            )
            for v in range(2)
        )
        samples.append(
            DualViewSample(
                sample_id=int(arrays["sample_id"][i]),
                seed=int(arrays["sample_seed"][i]),
                gt=arrays["gt"][i] if has_gt else None,
                raw=arrays["raw"][i],
                heatmaps=(heatmaps[0], heatmaps[1]),
                hard_frame=bool(hard[i]) if hard is not None else False,
            )
        )
    return DualViewDataset(samples, template, rig, corruption, seed=header["seed"])
