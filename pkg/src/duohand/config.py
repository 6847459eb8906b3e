"""Configuration management for duohand.

A single YAML file holds three sections: ``scene`` (dataset synthesis),
``adaptation`` (the adaptation loop) and ``refine`` (rotation-guided
refinement). Missing keys fall back to ``DEFAULT_CONFIG``.
"""

import copy
import hashlib
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

import yaml

from .errors import ConfigError

CONFIG_FILENAME = "duohand.yaml"
OUTPUT_ROOT_ENV = "DUOHAND_OUTPUT_ROOT"

PSEUDO_LABEL_MODES = ("full", "abm-only", "rgr-only", "self")

DEFAULT_CONFIG: Dict[str, Any] = {
    "scene": {
        "count": 1000,
        "seed": 0,
        "jitter_deg": 15.0,
        "camera_distance": 400.0,
        "r_gt_deg": None,
        "views": [
            {"bias_scale": 15.0, "noise_sigma": 8.0, "visibility": 1.0, "sigma_conf": 30.0},
            {"bias_scale": 15.0, "noise_sigma": 8.0, "visibility": 1.0, "sigma_conf": 30.0},
        ],
        "occlusion": {"fraction": 1.0, "visibility": 0.5, "bias_scale": 100.0},
        "failures": {"rate": 0.1, "min_angle_deg": 15.0, "max_angle_deg": 35.0},
    },
    "adaptation": {
        "alpha": 0.7,
        "beta": "inf",
        "eta_theta": 0.99,
        "eta_r": 0.999,
        "init_pairs": 1000,
        "batch_size": 32,
        "epochs": 20,
        "learning_rate": 1e-2,
        "optimizer_momentum": 0.0,
        "gain_lr_scale": 1e-7,
        "mode": "full",
        "workers": 1,
        "seed": 0,
    },
    "refine": {
        "max_iterations": 50,
        "tolerance": 1e-8,
        "fd_step": 1e-4,
        "proximity": 1e-3,
    },
}


@dataclass(frozen=True)
class ViewCorruptionConfig:
    """Corruption parameters for one view before its bias field is drawn."""

    bias_scale: float = 15.0
    noise_sigma: float = 8.0
    visibility: float = 1.0
    sigma_conf: float = 30.0


@dataclass(frozen=True)
class OcclusionConfig:
    """Joints that one camera sees and the other does not.

    ``fraction`` of the 20 non-wrist joints are split evenly between the
    views; in the view that hides a joint its visibility drops to
    ``visibility`` and an extra uniform bias of half-width ``bias_scale`` is
    added. The split is drawn once per dataset.
    """

    fraction: float = 1.0
    visibility: float = 0.5
    bias_scale: float = 100.0

    @classmethod
    def none(cls) -> "OcclusionConfig":
        return cls(fraction=0.0)


@dataclass(frozen=True)
class LiftingFailureConfig:
    """Hard frames in which both views lift the hand at a wrong orientation.

    A hard frame turns each view's estimate about its wrist by an angle drawn
    uniformly from ``[min_angle_deg, max_angle_deg]`` around an independent
    random axis. Heatmaps are not affected.
    """

    rate: float = 0.1
    min_angle_deg: float = 15.0
    max_angle_deg: float = 35.0

    @classmethod
    def none(cls) -> "LiftingFailureConfig":
        return cls(rate=0.0)


@dataclass(frozen=True)
class SceneConfig:
    """Parameters of a synthetic dual-view dataset."""

    count: int = 1000
    seed: int = 0
    jitter_deg: float = 15.0
    camera_distance: float = 400.0
    r_gt_deg: Optional[Tuple[float, float, float]] = None
    views: Tuple[ViewCorruptionConfig, ViewCorruptionConfig] = (ViewCorruptionConfig(), ViewCorruptionConfig())
    occlusion: OcclusionConfig = OcclusionConfig()
    failures: LiftingFailureConfig = LiftingFailureConfig()


@dataclass(frozen=True)
class RefineSettings:
    """Settings of the rotation-guided refinement optimizer."""

    max_iterations: int = 50
    tolerance: float = 1e-8
    fd_step: float = 1e-4
    proximity: float = 1e-3


@dataclass(frozen=True)
class AdaptationConfig:
    """All hyper-parameters of one adaptation run.

    The optimizer is plain gradient descent unless ``optimizer_momentum`` is
    set. Gains take ``learning_rate * gain_lr_scale`` steps: their gradient
    sums joint coordinates of order 100 mm over 20 joints, about 1e5 times the
    curvature an offset sees, and 1e-7 keeps a gain step near 1% of an offset
    step once that curvature is factored in.
    """

    alpha: float = 0.7
    beta: float = math.inf
    eta_theta: float = 0.99
    eta_r: float = 0.999
    init_pairs: int = 1000
    batch_size: int = 32
    epochs: int = 20
    learning_rate: float = 1e-2
    optimizer_momentum: float = 0.0
    gain_lr_scale: float = 1e-7
    mode: str = "full"
    workers: int = 1
    seed: int = 0
    refine: RefineSettings = field(default_factory=RefineSettings)

    def to_dict(self) -> Dict[str, Any]:
        """Plain-data form, with ``beta = inf`` written as the string ``inf``."""
        data = asdict(self)
        refine = data.pop("refine")
        if math.isinf(data["beta"]):
            data["beta"] = "inf"
        return {"adaptation": data, "refine": refine}

    def replace(self, **changes: Any) -> "AdaptationConfig":
        """Return a copy with some fields changed, re-validated."""
        data = self.to_dict()
        for key, value in changes.items():
            if key == "refine":
                data["refine"] = asdict(value)
            else:
                data["adaptation"][key] = value
        return parse_adaptation(data)


def get_config_path() -> Path:
    """Get the path to the configuration file in the current directory."""
    return Path.cwd() / CONFIG_FILENAME


def _deep_merge(base: Dict[str, Any], override: Dict[str, Any]) -> Dict[str, Any]:
    merged = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = _deep_merge(merged[key], value)
        else:
            merged[key] = copy.deepcopy(value)
    return merged


def load_config(path: Optional[Path] = None) -> Dict[str, Any]:
    """Load configuration from file merged over the defaults.

    Args:
        path: Config file to read. Defaults to ``duohand.yaml`` in the
            current directory; a missing default file yields the defaults.

    Raises:
        ConfigError: if an explicitly given file is missing or not a mapping.
    """
    config_path = Path(path) if path is not None else get_config_path()
    if not config_path.exists():
        if path is not None:
            raise ConfigError(f"config file not found: {config_path}")
        return copy.deepcopy(DEFAULT_CONFIG)

    try:
        with open(config_path, "r") as f:
            config = yaml.safe_load(f) or {}
    except (OSError, yaml.YAMLError) as e:
        raise ConfigError(f"cannot read config {config_path}: {e}") from e
    if not isinstance(config, dict):
        raise ConfigError(f"config {config_path} must be a mapping")
    return _deep_merge(DEFAULT_CONFIG, config)


def save_config(config: Dict[str, Any], path: Optional[Path] = None) -> Path:
    """Save configuration to file."""
    config_path = Path(path) if path is not None else get_config_path()
    try:
        with open(config_path, "w") as f:
            yaml.safe_dump(config, f, default_flow_style=False, sort_keys=False)
    except OSError as e:
        raise ConfigError(f"cannot write config {config_path}: {e}") from e
    return config_path


def _number(section: Dict[str, Any], key: str, prefix: str) -> float:
    try:
        value = float(section[key])
    except KeyError:
        raise ConfigError("missing value", f"{prefix}.{key}") from None
    except (TypeError, ValueError):
        raise ConfigError(f"not a number: {section[key]!r}", f"{prefix}.{key}") from None
    if math.isnan(value):
        raise ConfigError("must not be NaN", f"{prefix}.{key}")
    return value


def _integer(section: Dict[str, Any], key: str, prefix: str) -> int:
    value = _number(section, key, prefix)
    if math.isinf(value) or value != int(value):
        raise ConfigError(f"must be an integer, got {section[key]!r}", f"{prefix}.{key}")
    return int(value)


def _check(condition: bool, message: str, path: str) -> None:
    if not condition:
        raise ConfigError(message, path)


def parse_refine(section: Dict[str, Any], prefix: str = "refine") -> RefineSettings:
    """Validate the ``refine`` section."""
    settings = RefineSettings(
        max_iterations=_integer(section, "max_iterations", prefix),
        tolerance=_number(section, "tolerance", prefix),
        fd_step=_number(section, "fd_step", prefix),
        proximity=_number(section, "proximity", prefix),
    )
    _check(settings.max_iterations >= 1, "must be >= 1", f"{prefix}.max_iterations")
    _check(settings.tolerance > 0, "must be > 0", f"{prefix}.tolerance")
    _check(settings.fd_step > 0, "must be > 0", f"{prefix}.fd_step")
    _check(settings.proximity >= 0, "must be >= 0", f"{prefix}.proximity")
    return settings


def parse_adaptation(config: Dict[str, Any]) -> AdaptationConfig:
    """Build a validated ``AdaptationConfig`` from a merged config mapping."""
    merged = _deep_merge(
        {"adaptation": DEFAULT_CONFIG["adaptation"], "refine": DEFAULT_CONFIG["refine"]},
        {k: v for k, v in config.items() if k in ("adaptation", "refine")},
    )
    section = merged["adaptation"]
    p = "adaptation"
    beta = _number(section, "beta", p)
    mode = str(section.get("mode", "full"))
    cfg = AdaptationConfig(
        alpha=_number(section, "alpha", p),
        beta=beta,
        eta_theta=_number(section, "eta_theta", p),
        eta_r=_number(section, "eta_r", p),
        init_pairs=_integer(section, "init_pairs", p),
        batch_size=_integer(section, "batch_size", p),
        epochs=_integer(section, "epochs", p),
        learning_rate=_number(section, "learning_rate", p),
        optimizer_momentum=_number(section, "optimizer_momentum", p),
        gain_lr_scale=_number(section, "gain_lr_scale", p),
        mode=mode,
        workers=_integer(section, "workers", p),
        seed=_integer(section, "seed", p),
        refine=parse_refine(merged["refine"]),
    )
    _check(0.0 <= cfg.alpha <= 1.0, "must be in [0, 1]", f"{p}.alpha")
    _check(cfg.beta > 0, "must be > 0 (use 'inf' for hard selection)", f"{p}.beta")
    _check(0.0 <= cfg.eta_theta < 1.0, "must be in [0, 1)", f"{p}.eta_theta")
    _check(0.0 <= cfg.eta_r <= 1.0, "must be in [0, 1]", f"{p}.eta_r")
    _check(cfg.init_pairs >= 1, "must be >= 1", f"{p}.init_pairs")
    _check(cfg.batch_size >= 1, "must be >= 1", f"{p}.batch_size")
    _check(cfg.epochs >= 0, "must be >= 0", f"{p}.epochs")
    _check(cfg.learning_rate >= 0 and math.isfinite(cfg.learning_rate), "must be >= 0", f"{p}.learning_rate")
    _check(0.0 <= cfg.optimizer_momentum < 1.0, "must be in [0, 1)", f"{p}.optimizer_momentum")
    _check(cfg.gain_lr_scale >= 0, "must be >= 0", f"{p}.gain_lr_scale")
    _check(mode in PSEUDO_LABEL_MODES, f"must be one of {', '.join(PSEUDO_LABEL_MODES)}", f"{p}.mode")
    _check(cfg.workers >= 1, "must be >= 1", f"{p}.workers")
    return cfg


def _parse_view(section: Any, prefix: str) -> ViewCorruptionConfig:
    if not isinstance(section, dict):
        raise ConfigError("must be a mapping", prefix)
    section = {**DEFAULT_CONFIG["scene"]["views"][0], **section}
    view = ViewCorruptionConfig(
        bias_scale=_number(section, "bias_scale", prefix),
        noise_sigma=_number(section, "noise_sigma", prefix),
        visibility=_number(section, "visibility", prefix),
        sigma_conf=_number(section, "sigma_conf", prefix),
    )
    _check(view.bias_scale >= 0, "must be >= 0", f"{prefix}.bias_scale")
    _check(view.noise_sigma >= 0, "must be >= 0", f"{prefix}.noise_sigma")
    _check(0.0 < view.visibility <= 1.0, "must be in (0, 1]", f"{prefix}.visibility")
    _check(view.sigma_conf > 0, "must be > 0", f"{prefix}.sigma_conf")
    return view


def _parse_occlusion(section: Any, prefix: str) -> OcclusionConfig:
    if not isinstance(section, dict):
        raise ConfigError("must be a mapping", prefix)
    occlusion = OcclusionConfig(
        fraction=_number(section, "fraction", prefix),
        visibility=_number(section, "visibility", prefix),
        bias_scale=_number(section, "bias_scale", prefix),
    )
    _check(0.0 <= occlusion.fraction <= 1.0, "must be in [0, 1]", f"{prefix}.fraction")
    _check(0.0 < occlusion.visibility <= 1.0, "must be in (0, 1]", f"{prefix}.visibility")
    _check(occlusion.bias_scale >= 0, "must be >= 0", f"{prefix}.bias_scale")
    return occlusion


def _parse_failures(section: Any, prefix: str) -> LiftingFailureConfig:
    if not isinstance(section, dict):
        raise ConfigError("must be a mapping", prefix)
    failures = LiftingFailureConfig(
        rate=_number(section, "rate", prefix),
        min_angle_deg=_number(section, "min_angle_deg", prefix),
        max_angle_deg=_number(section, "max_angle_deg", prefix),
    )
    _check(0.0 <= failures.rate <= 1.0, "must be in [0, 1]", f"{prefix}.rate")
    _check(0.0 <= failures.min_angle_deg <= 180.0, "must be in [0, 180]", f"{prefix}.min_angle_deg")
    _check(
        failures.min_angle_deg <= failures.max_angle_deg <= 180.0,
        "must be in [min_angle_deg, 180]",
        f"{prefix}.max_angle_deg",
    )
    return failures


def parse_scene(config: Dict[str, Any]) -> SceneConfig:
    """Build a validated ``SceneConfig`` from a merged config mapping."""
    section = _deep_merge(DEFAULT_CONFIG["scene"], config.get("scene") or {})
    p = "scene"
    views = section.get("views")
    if not isinstance(views, list) or len(views) != 2:
        raise ConfigError("must list exactly two views", f"{p}.views")
    r_gt: Optional[Tuple[float, float, float]] = None
    if section.get("r_gt_deg") is not None:
        raw: List[Any] = list(section["r_gt_deg"])
        if len(raw) != 3:
            raise ConfigError("must be a rotation vector of three angles (degrees)", f"{p}.r_gt_deg")
        vec = {str(i): v for i, v in enumerate(raw)}
        r_gt = (
            _number(vec, "0", f"{p}.r_gt_deg"),
            _number(vec, "1", f"{p}.r_gt_deg"),
            _number(vec, "2", f"{p}.r_gt_deg"),
        )
    scene = SceneConfig(
        count=_integer(section, "count", p),
        seed=_integer(section, "seed", p),
        jitter_deg=_number(section, "jitter_deg", p),
        camera_distance=_number(section, "camera_distance", p),
        r_gt_deg=r_gt,
        views=(_parse_view(views[0], f"{p}.views[0]"), _parse_view(views[1], f"{p}.views[1]")),
        occlusion=_parse_occlusion(section.get("occlusion"), f"{p}.occlusion"),
        failures=_parse_failures(section.get("failures"), f"{p}.failures"),
    )
    _check(scene.count >= 0, "must be >= 0", f"{p}.count")
    _check(scene.seed >= 0, "must be >= 0", f"{p}.seed")
    _check(0.0 <= scene.jitter_deg <= 90.0, "must be in [0, 90]", f"{p}.jitter_deg")
    _check(scene.camera_distance > 0, "must be > 0", f"{p}.camera_distance")
    return scene


def config_hash(config: AdaptationConfig) -> str:
    """Stable digest of an adaptation config, used to bind checkpoints.

    ``workers`` is left out: the thread count never changes results.
    """
    data = config.to_dict()
    data["adaptation"].pop("workers")
    canonical = yaml.safe_dump(data, sort_keys=True)
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()
