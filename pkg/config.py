"""
Configuration for the fusion/tracking pipeline.

Process-level settings come from the environment (optionally a .env file);
pipeline settings come from one TOML file whose sections map onto the frozen
settings dataclasses below.
"""
import os
import math
import logging
try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from dataclasses import dataclass, field
from typing import Any, Dict, Mapping, Optional, Sequence, Tuple

from dotenv import load_dotenv

from box_estimation import DEFAULT_PRIORS, AmodalMode, SizePrior
from fusion_association import ClassLabel
from motion_models import MotionKind, MotionModel
from rig_geometry import CameraModel, LidarModel, Pose, SensorRig, default_rig

load_dotenv()

logger = logging.getLogger(__name__)


class ConfigError(ValueError):
    """Malformed configuration or scenario value; the message names the key."""


LOG_LEVELS = ("DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL")


@dataclass(frozen=True)
class AppConfig:
    """Process configuration read from the environment."""
    log_level: str = "INFO"
    threads: int = 0  # 0 = one per camera, capped by CPU count
    out_dir: str = "out"
    log_file: str = "run.log"


def load_app_config(environ: Optional[Mapping[str, str]] = None) -> AppConfig:
    """
    Read process settings from the environment.

    Raises:
        ConfigError: a variable does not parse; the message names it
    """
    env = os.environ if environ is None else environ
    log_level = env.get("LOG_LEVEL", "INFO").strip().upper()
    if log_level not in LOG_LEVELS:
        raise ConfigError(f"LOG_LEVEL: expected one of {', '.join(LOG_LEVELS)}, got {log_level!r}")
    raw_threads = env.get("FUSIONTRACK_THREADS", "0").strip()
    try:
        threads = int(raw_threads)
    except ValueError:
        raise ConfigError(f"FUSIONTRACK_THREADS: expected an integer, got {raw_threads!r}") from None
    if threads < 0:
        raise ConfigError(f"FUSIONTRACK_THREADS: must be >= 0, got {threads}")
    return AppConfig(log_level=log_level, threads=threads,
                     out_dir=env.get("FUSIONTRACK_OUT_DIR", "out"),
                     log_file=env.get("FUSIONTRACK_LOG_FILE", "run.log"))


class TableReader:
    """
    Typed access to one TOML table.

    Every read records the key; `finish()` rejects keys that were never read.
    """

    def __init__(self, name: str, table: Any):
        if table is None:
            table = {}
        if not isinstance(table, dict):
            raise ConfigError(f"{name}: expected a table")
        self.name = name
        self.table = table
        self._seen = set()

    def raw(self, key: str, default: Any) -> Any:
        self._seen.add(key)
        return self.table.get(key, default)

    def error(self, key: str, message: str) -> ConfigError:
        return ConfigError(f"{self.name}.{key}: {message}")

    def has(self, key: str) -> bool:
        return key in self.table

    def number(self, key: str, default: Optional[float], *, minimum: Optional[float] = None,
               maximum: Optional[float] = None, exclusive_min: bool = False) -> Optional[float]:
        value = self.raw(key, default)
        if value is None:
            return None
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise self.error(key, f"expected a number, got {value!r}")
        value = float(value)
        if not math.isfinite(value):
            raise self.error(key, "must be finite")
        if minimum is not None:
            if exclusive_min and value <= minimum:
                raise self.error(key, f"must be > {minimum:g}")
            if not exclusive_min and value < minimum:
                raise self.error(key, f"must be >= {minimum:g}")
        if maximum is not None and value > maximum:
            raise self.error(key, f"must be <= {maximum:g}")
        return value

    def integer(self, key: str, default: Optional[int], *, minimum: Optional[int] = None) -> Optional[int]:
        value = self.raw(key, default)
        if value is None:
            return None
        if isinstance(value, bool) or not isinstance(value, int):
            raise self.error(key, f"expected an integer, got {value!r}")
        if minimum is not None and value < minimum:
            raise self.error(key, f"must be >= {minimum}")
        return value

    def boolean(self, key: str, default: bool) -> bool:
        value = self.raw(key, default)
        if not isinstance(value, bool):
            raise self.error(key, f"expected true or false, got {value!r}")
        return value

    def string(self, key: str, default: Optional[str], choices: Optional[Sequence[str]] = None) -> Optional[str]:
        value = self.raw(key, default)
        if value is None:
            return None
        if not isinstance(value, str):
            raise self.error(key, f"expected a string, got {value!r}")
        if choices is not None and value not in choices:
            raise self.error(key, f"must be one of {', '.join(choices)}")
        return value

    def vector(self, key: str, default: Optional[Sequence[float]], length: Optional[int] = None) -> Optional[Tuple[float, ...]]:
        value = self.raw(key, default)
        if value is None:
            return None
        if not isinstance(value, (list, tuple)) or not all(
                isinstance(v, (int, float)) and not isinstance(v, bool) for v in value):
            raise self.error(key, f"expected a list of numbers, got {value!r}")
        if length is not None and len(value) != length:
            raise self.error(key, f"expected {length} values, got {len(value)}")
        if not all(math.isfinite(v) for v in value):
            raise self.error(key, "values must be finite")
        return tuple(float(v) for v in value)

    def table_of(self, key: str) -> "TableReader":
        return TableReader(f"{self.name}.{key}", self.raw(key, None))

    def finish(self) -> None:
        unknown = sorted(set(self.table) - self._seen)
        if unknown:
            raise ConfigError(f"{self.name}.{unknown[0]}: unknown key")


def _class_label(name: str, context: str) -> ClassLabel:
    try:
        return ClassLabel(name)
    except ValueError:
        raise ConfigError(f"{context}.{name}: unknown class (expected Car, Pedestrian or Cyclist)") from None


@dataclass(frozen=True)
class EstimatorSettings:
    min_points: int = 5
    ground_margin: float = 0.15
    cluster_radius: float = 0.7
    amodal_mode: AmodalMode = AmodalMode.SYMMETRIC


@dataclass(frozen=True)
class AssociationSettings:
    mode: str = "mask"
    near: float = 0.5
    far: Optional[float] = None  # defaults to the LiDAR max range


@dataclass(frozen=True)
class NmsSettings:
    iou_threshold: float = 0.3


DEFAULT_MOTION_KINDS = {
    ClassLabel.CAR: MotionKind.CTRV,
    ClassLabel.CYCLIST: MotionKind.CTRV,
    ClassLabel.PEDESTRIAN: MotionKind.CV,
}

DEFAULT_PROCESS_NOISE = {
    ClassLabel.CAR: (2.0, 0.6),
    ClassLabel.CYCLIST: (2.0, 0.6),
    ClassLabel.PEDESTRIAN: (1.0, 0.6),
}


@dataclass(frozen=True)
class TrackerSettings:
    """Filter, gating and lifecycle parameters."""
    models: Mapping[ClassLabel, MotionKind] = field(default_factory=lambda: dict(DEFAULT_MOTION_KINDS))
    process_noise: Mapping[ClassLabel, Tuple[float, float]] = field(
        default_factory=lambda: dict(DEFAULT_PROCESS_NOISE))
    alpha_ctrv: float = 0.5
    alpha_cv: float = 1e-3
    beta: float = 2.0
    kappa: float = 0.0
    position_sigma: float = 0.3
    yaw_sigma: float = 0.1
    init_speed_sigma_ctrv: float = 10.0
    init_speed_sigma_cv: float = 3.0
    init_yaw_rate_sigma: float = 0.5
    confirm_hits: int = 3
    confirm_window: int = 5
    max_misses: int = 5
    gate_probability: float = 0.99
    size_ema_alpha: float = 0.3
    yaw_flip_speed: float = 1.0

    def motion_model(self, class_label: ClassLabel) -> MotionModel:
        kind = self.models.get(class_label, DEFAULT_MOTION_KINDS[class_label])
        accel, yaw_accel = self.process_noise.get(class_label, DEFAULT_PROCESS_NOISE[class_label])
        ctrv = kind is MotionKind.CTRV
        return MotionModel(
            kind=kind,
            accel_sigma=accel,
            yaw_accel_sigma=yaw_accel,
            alpha=self.alpha_ctrv if ctrv else self.alpha_cv,
            beta=self.beta,
            kappa=self.kappa,
            position_sigma=self.position_sigma,
            yaw_sigma=self.yaw_sigma,
            init_speed_sigma=self.init_speed_sigma_ctrv if ctrv else self.init_speed_sigma_cv,
            init_yaw_rate_sigma=self.init_yaw_rate_sigma,
        )


@dataclass(frozen=True)
class EvaluationSettings:
    match_cap_m: float = 2.0
    heading_flip_forgiveness: bool = False


@dataclass(frozen=True)
class OutputSettings:
    svg_every: int = 0  # 0 disables snapshots
    report: bool = False


@dataclass(frozen=True)
class PipelineConfig:
    rig: SensorRig
    priors: Mapping[ClassLabel, SizePrior]
    estimator: EstimatorSettings = EstimatorSettings()
    association: AssociationSettings = AssociationSettings()
    nms: NmsSettings = NmsSettings()
    tracker: TrackerSettings = TrackerSettings()
    evaluation: EvaluationSettings = EvaluationSettings()
    output: OutputSettings = OutputSettings()

    @property
    def association_far(self) -> float:
        return self.association.far if self.association.far is not None else self.rig.lidar.max_range


def _pose(reader: TableReader, default_translation: Sequence[float]) -> Pose:
    translation = reader.vector("translation", default_translation, length=3)
    quat = reader.vector("rotation_quat", (1.0, 0.0, 0.0, 0.0), length=4)
    try:
        return Pose.from_quaternion(quat, translation)
    except ValueError as e:
        raise reader.error("rotation_quat", str(e)) from None


def _roi(reader: TableReader) -> Optional[Tuple[int, int]]:
    roi = reader.vector("roi_rows", None, length=2)
    return None if roi is None else (int(roi[0]), int(roi[1]))


def _parse_lidar(reader: TableReader) -> LidarModel:
    defaults = LidarModel()
    n_layers = reader.integer("n_layers", defaults.n_layers, minimum=1)
    vmin = reader.number("vertical_min_deg", -25.0, minimum=-90.0)
    vmax = reader.number("vertical_max_deg", 15.0, maximum=90.0)
    angles = reader.vector("vertical_angles_deg", None, length=n_layers if reader.has("vertical_angles_deg") else None)
    resolution = reader.number("horizontal_resolution_deg", defaults.horizontal_resolution,
                               minimum=0.0, exclusive_min=True, maximum=360.0)
    max_range = reader.number("max_range_m", defaults.max_range, minimum=0.0, exclusive_min=True)
    sigma = reader.number("range_noise_sigma_m", defaults.range_noise_sigma, minimum=0.0)
    reader.finish()
    try:
        if angles is None:
            return LidarModel.uniform(n_layers, vmin, vmax, horizontal_resolution=resolution,
                                      max_range=max_range, range_noise_sigma=sigma)
        return LidarModel(n_layers=n_layers, vertical_angles=angles, horizontal_resolution=resolution,
                          max_range=max_range, range_noise_sigma=sigma)
    except ValueError as e:
        key = "vertical_angles_deg" if angles is not None else "vertical_min_deg"
        raise reader.error(key, str(e)) from None


def _parse_camera(reader: TableReader, index: int, binning: int) -> CameraModel:
    kwargs = {}
    for key in ("fx", "fy", "cx", "cy"):
        value = reader.number(key, None, minimum=0.0, exclusive_min=True)
        if value is None:
            raise reader.error(key, "required")
        kwargs[key] = value
    for key in ("width", "height"):
        value = reader.integer(key, None, minimum=1)
        if value is None:
            raise reader.error(key, "required")
        kwargs[key] = value
    hfov = reader.number("hfov_deg", None, minimum=0.0, exclusive_min=True, maximum=180.0)
    name = reader.string("name", f"cam{index}")
    extrinsic = _pose(reader, (0.0, 0.0, 0.0))
    roi = _roi(reader)
    reader.finish()
    try:
        cam = CameraModel(extrinsic=extrinsic, hfov=hfov, roi_rows=roi, name=name, **kwargs)
    except ValueError as e:
        raise ConfigError(f"{reader.name}: {e}") from None
    return cam.binned(binning)


def _parse_rig(raw: Dict[str, Any]) -> SensorRig:
    rig_reader = TableReader("rig", raw.get("rig"))
    n_cameras = rig_reader.integer("n_cameras", 5, minimum=1)
    hfov = rig_reader.number("hfov_deg", 85.0, minimum=0.0, exclusive_min=True, maximum=180.0)
    width = rig_reader.integer("width", 640, minimum=1)
    height = rig_reader.integer("height", 480, minimum=1)
    first_azimuth = rig_reader.number("first_azimuth_deg", 0.0)
    binning = rig_reader.integer("binning", 1, minimum=1)
    roi = _roi(rig_reader)
    rig_reader.finish()

    lidar = _parse_lidar(TableReader("lidar", raw.get("lidar")))
    ego_reader = TableReader("ego", raw.get("ego"))
    ego_extrinsic = _pose(ego_reader, (0.0, 0.0, 1.8))
    ego_reader.finish()

    camera_tables = raw.get("camera")
    try:
        if camera_tables:
            if not isinstance(camera_tables, list):
                raise ConfigError("camera: expected an array of tables ([[camera]])")
            cameras = tuple(_parse_camera(TableReader(f"camera[{i}]", t), i, binning)
                            for i, t in enumerate(camera_tables))
            rig = SensorRig(cameras=cameras, lidar=lidar, ego_extrinsic=ego_extrinsic)
        else:
            rig = default_rig(n_cameras=n_cameras, hfov_deg=hfov, width=width, height=height,
                              first_azimuth_deg=first_azimuth, lidar=lidar, ego_extrinsic=ego_extrinsic,
                              binning=binning, roi_rows=roi)
    except ConfigError:
        raise
    except ValueError as e:
        raise ConfigError(f"rig: {e}") from None

    problems = rig.validate()
    if problems:
        raise ConfigError(f"rig: {problems[0]}")
    return rig


def _parse_priors(raw: Any) -> Dict[ClassLabel, SizePrior]:
    priors = dict(DEFAULT_PRIORS)
    reader = TableReader("priors", raw)
    for name in list(reader.table):
        label = _class_label(name, "priors")
        sub = reader.table_of(name)
        base = priors[label]
        mean = sub.vector("mean", base.mean_size, length=3)
        default_min = tuple(v * 0.6 for v in mean) if sub.has("mean") else base.min_size
        default_max = tuple(v * 1.4 for v in mean) if sub.has("mean") else base.max_size
        lo = sub.vector("min", default_min, length=3)
        hi = sub.vector("max", default_max, length=3)
        sub.finish()
        try:
            priors[label] = SizePrior(label, mean, lo, hi)
        except ValueError as e:
            raise ConfigError(f"priors.{name}: {e}") from None
    reader.finish()
    return priors


def _parse_tracker(raw: Any) -> TrackerSettings:
    reader = TableReader("tracker", raw)
    d = TrackerSettings()

    models = dict(DEFAULT_MOTION_KINDS)
    models_reader = reader.table_of("models")
    for name in list(models_reader.table):
        label = _class_label(name, "tracker.models")
        kind = models_reader.string(name, None, choices=[k.value for k in MotionKind])
        models[label] = MotionKind(kind)
    models_reader.finish()

    noise = dict(DEFAULT_PROCESS_NOISE)
    noise_reader = reader.table_of("noise")
    for name in list(noise_reader.table):
        label = _class_label(name, "tracker.noise")
        sub = noise_reader.table_of(name)
        accel = sub.number("accel_sigma", noise[label][0], minimum=0.0, exclusive_min=True)
        yaw_accel = sub.number("yaw_accel_sigma", noise[label][1], minimum=0.0, exclusive_min=True)
        sub.finish()
        noise[label] = (accel, yaw_accel)
    noise_reader.finish()

    positive = dict(minimum=0.0, exclusive_min=True)
    settings = TrackerSettings(
        models=models,
        process_noise=noise,
        alpha_ctrv=reader.number("alpha_ctrv", d.alpha_ctrv, maximum=1.0, **positive),
        alpha_cv=reader.number("alpha_cv", d.alpha_cv, maximum=1.0, **positive),
        beta=reader.number("beta", d.beta, minimum=0.0),
        kappa=reader.number("kappa", d.kappa, minimum=0.0),
        position_sigma=reader.number("position_sigma", d.position_sigma, **positive),
        yaw_sigma=reader.number("yaw_sigma", d.yaw_sigma, **positive),
        init_speed_sigma_ctrv=reader.number("init_speed_sigma_ctrv", d.init_speed_sigma_ctrv, **positive),
        init_speed_sigma_cv=reader.number("init_speed_sigma_cv", d.init_speed_sigma_cv, **positive),
        init_yaw_rate_sigma=reader.number("init_yaw_rate_sigma", d.init_yaw_rate_sigma, **positive),
        confirm_hits=reader.integer("confirm_hits", d.confirm_hits, minimum=1),
        confirm_window=reader.integer("confirm_window", d.confirm_window, minimum=1),
        max_misses=reader.integer("max_misses", d.max_misses, minimum=0),
        gate_probability=reader.number("gate_probability", d.gate_probability, maximum=0.999999, **positive),
        size_ema_alpha=reader.number("size_ema_alpha", d.size_ema_alpha, maximum=1.0, **positive),
        yaw_flip_speed=reader.number("yaw_flip_speed", d.yaw_flip_speed, minimum=0.0),
    )
    reader.finish()
    if settings.confirm_hits > settings.confirm_window:
        raise ConfigError("tracker.confirm_hits: must be <= tracker.confirm_window")
    return settings


def pipeline_config_from_dict(raw: Dict[str, Any]) -> PipelineConfig:
    """
    Build a PipelineConfig from parsed TOML.

    Raises:
        ConfigError: malformed or unknown key
    """
    known = {"rig", "camera", "lidar", "ego", "priors", "estimator", "association",
             "nms", "tracker", "evaluation", "output"}
    for key in raw:
        if key not in known:
            raise ConfigError(f"{key}: unknown section")

    rig = _parse_rig(raw)
    priors = _parse_priors(raw.get("priors"))

    r = TableReader("estimator", raw.get("estimator"))
    estimator = EstimatorSettings(
        min_points=r.integer("min_points", 5, minimum=1),
        ground_margin=r.number("ground_margin", 0.15, minimum=0.0),
        cluster_radius=r.number("cluster_radius", 0.7, minimum=0.0, exclusive_min=True),
        amodal_mode=AmodalMode(r.string("amodal_mode", "symmetric", choices=[m.value for m in AmodalMode])),
    )
    r.finish()

    r = TableReader("association", raw.get("association"))
    association = AssociationSettings(
        mode=r.string("mode", "mask", choices=["mask", "frustum"]),
        near=r.number("near", 0.5, minimum=0.0, exclusive_min=True),
        far=r.number("far", None, minimum=0.0, exclusive_min=True),
    )
    r.finish()
    if association.far is not None and association.far <= association.near:
        raise ConfigError("association.far: must be > association.near")

    r = TableReader("nms", raw.get("nms"))
    nms = NmsSettings(iou_threshold=r.number("iou_threshold", 0.3, minimum=0.0, maximum=1.0))
    r.finish()

    tracker = _parse_tracker(raw.get("tracker"))

    r = TableReader("evaluation", raw.get("evaluation"))
    evaluation = EvaluationSettings(
        match_cap_m=r.number("match_cap_m", 2.0, minimum=0.0, exclusive_min=True),
        heading_flip_forgiveness=r.boolean("heading_flip_forgiveness", False),
    )
    r.finish()

    r = TableReader("output", raw.get("output"))
    output = OutputSettings(svg_every=r.integer("svg_every", 0, minimum=0), report=r.boolean("report", False))
    r.finish()

    return PipelineConfig(rig=rig, priors=priors, estimator=estimator, association=association,
                          nms=nms, tracker=tracker, evaluation=evaluation, output=output)


def read_toml(path: str) -> Dict[str, Any]:
    """Parse a TOML file; syntax errors become ConfigError."""
    with open(path, "rb") as f:
        try:
            return tomllib.load(f)
        except tomllib.TOMLDecodeError as e:
            raise ConfigError(f"{path}: {e}") from None


def load_pipeline_config(path: str) -> PipelineConfig:
    """
    Load the main pipeline configuration file.

    Raises:
        FileNotFoundError: missing file
        ConfigError: malformed content
    """
    config = pipeline_config_from_dict(read_toml(path))
    logger.info(f"Loaded pipeline config from {path}: {len(config.rig.cameras)} cameras, "
                f"{config.rig.lidar.n_layers} LiDAR layers, association={config.association.mode}")
    return config
