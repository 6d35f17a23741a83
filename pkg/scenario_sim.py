"""
Deterministic synthetic world for exercising the pipeline.

Scripted cuboid agents and an ego path are evaluated analytically; the LiDAR is
ray-cast against the agents and a flat ground plane, and per-camera instance
masks are rasterized from the projected cuboid silhouettes with painter's
algorithm occlusion. Every random draw comes from a generator seeded by
(scenario seed, frame index, stream), so any frame renders identically on its
own.
"""
import os
import math
import logging
from dataclasses import dataclass, field
from enum import Enum
from functools import cached_property
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage
from scipy.interpolate import CubicSpline
from scipy.spatial import ConvexHull, QhullError
from scipy.spatial.transform import Rotation

from config import ConfigError, TableReader, read_toml
from fusion_association import ClassLabel, Detection2D
from rig_geometry import CameraModel, PixelRect, PointCloud, Pose, SensorRig
from tracker import EgoPose
from utils import round_floats, wrap_angle

logger = logging.getLogger(__name__)

GROUND_LABEL = -1
NEAR_CLIP = 0.1

STREAM_LIDAR = 0
STREAM_DETECTIONS = 1
STREAM_EGO = 2
STREAM_RIG = 3


class ScenarioTimeError(ValueError):
    """Raised when a scenario is evaluated outside [0, duration]."""


class AgentMotion(str, Enum):
    CONSTANT_VELOCITY = "constant-velocity"
    CONSTANT_TURN = "constant-turn"
    WAYPOINT_SPLINE = "waypoint-spline"


@dataclass(frozen=True)
class NoiseSpec:
    lidar_range_sigma: float = 0.03
    mask_dilate_erode: int = 0
    mask_jitter_px: int = 1
    detection_dropout: float = 0.05
    extrinsic_perturb: Tuple[float, float] = (0.0, 0.0)  # (rotation deg, translation m), 1-sigma
    score_beta: Tuple[float, float] = (8.0, 2.0)
    ego_pose_sigma: Tuple[float, float] = (0.0, 0.0)  # (xy m, yaw rad)

    def __post_init__(self):
        if not 0.0 <= self.detection_dropout <= 1.0:
            raise ValueError("detection_dropout must be in [0, 1]")
        if self.lidar_range_sigma < 0 or self.mask_jitter_px < 0:
            raise ValueError("noise sigmas must be >= 0")
        if min(self.extrinsic_perturb) < 0 or min(self.ego_pose_sigma) < 0:
            raise ValueError("noise sigmas must be >= 0")
        if min(self.score_beta) <= 0:
            raise ValueError("score_beta parameters must be > 0")

    @classmethod
    def zero(cls) -> "NoiseSpec":
        return cls(lidar_range_sigma=0.0, mask_dilate_erode=0, mask_jitter_px=0, detection_dropout=0.0)


@dataclass(frozen=True)
class AgentScript:
    """Scripted rigid agent; positions are global, time is scenario time."""
    id: int
    class_label: ClassLabel
    size: Tuple[float, float, float]
    motion: AgentMotion
    start: Tuple[float, float] = (0.0, 0.0)
    heading_deg: float = 0.0
    speed: float = 0.0
    turn_rate_deg: float = 0.0
    waypoints: Tuple[Tuple[float, float, float], ...] = ()
    spawn: float = 0.0
    despawn: float = math.inf
    primary: bool = False
    occluded: Tuple[Tuple[float, float], ...] = ()  # intervals with no sensor return at all

    def __post_init__(self):
        object.__setattr__(self, "class_label", ClassLabel(self.class_label))
        object.__setattr__(self, "motion", AgentMotion(self.motion))
        if min(self.size) <= 0:
            raise ValueError(f"agent {self.id}: size components must be > 0")
        if self.speed < 0:
            raise ValueError(f"agent {self.id}: speed must be >= 0")
        if self.despawn < self.spawn:
            raise ValueError(f"agent {self.id}: despawn before spawn")
        if self.motion is AgentMotion.CONSTANT_TURN and (self.turn_rate_deg == 0 or self.speed == 0):
            raise ValueError(f"agent {self.id}: constant-turn needs a non-zero turn rate and speed")
        if self.motion is AgentMotion.WAYPOINT_SPLINE:
            if len(self.waypoints) < 2:
                raise ValueError(f"agent {self.id}: waypoint-spline needs at least two waypoints")
            times = [w[0] for w in self.waypoints]
            if any(b <= a for a, b in zip(times, times[1:])):
                raise ValueError(f"agent {self.id}: waypoint times must be strictly increasing")

    @cached_property
    def spline(self) -> CubicSpline:
        wp = np.asarray(self.waypoints, dtype=float)
        return CubicSpline(wp[:, 0], wp[:, 1:3], axis=0)

    def active(self, t: float) -> bool:
        return self.spawn <= t <= self.despawn

    def visible(self, t: float) -> bool:
        return self.active(t) and not any(a <= t <= b for a, b in self.occluded)

    def state_at(self, t: float) -> Tuple[float, float, float, float, float]:
        """(x, y, yaw, speed, yaw_rate) at scenario time t."""
        tau = t - self.spawn
        psi0 = math.radians(self.heading_deg)
        x0, y0 = self.start
        if self.motion is AgentMotion.CONSTANT_VELOCITY:
            return (x0 + self.speed * math.cos(psi0) * tau, y0 + self.speed * math.sin(psi0) * tau,
                    wrap_angle(psi0), self.speed, 0.0)
        if self.motion is AgentMotion.CONSTANT_TURN:
            omega = math.radians(self.turn_rate_deg)
            psi = psi0 + omega * tau
            r = self.speed / omega
            return (x0 + r * (math.sin(psi) - math.sin(psi0)), y0 + r * (math.cos(psi0) - math.cos(psi)),
                    wrap_angle(psi), self.speed, omega)
        t_first, t_last = self.waypoints[0][0], self.waypoints[-1][0]
        tc = min(max(t, t_first), t_last)
        pos = self.spline(tc)
        vel = self.spline(tc, 1)
        acc = self.spline(tc, 2)
        speed = float(math.hypot(vel[0], vel[1]))
        if speed < 1e-6:
            return float(pos[0]), float(pos[1]), wrap_angle(psi0), 0.0, 0.0
        yaw_rate = float((vel[0] * acc[1] - vel[1] * acc[0]) / (speed * speed))
        return float(pos[0]), float(pos[1]), wrap_angle(math.atan2(vel[1], vel[0])), speed, yaw_rate


@dataclass(frozen=True)
class Scenario:
    name: str
    seed: int
    duration: float
    rate: float = 10.0
    ego_path: Tuple[Tuple[float, float, float, float], ...] = ((0.0, 0.0, 0.0, 0.0),)  # (t, x, y, yaw_deg)
    agents: Tuple[AgentScript, ...] = ()
    noise: NoiseSpec = field(default_factory=NoiseSpec)

    def __post_init__(self):
        if self.rate <= 0:
            raise ValueError("rate must be > 0")
        if self.duration < 0:
            raise ValueError("duration must be >= 0")
        ids = [a.id for a in self.agents]
        if len(set(ids)) != len(ids):
            raise ValueError("agent ids must be unique")
        if len(self.ego_path) > 1:
            times = [p[0] for p in self.ego_path]
            if any(b <= a for a, b in zip(times, times[1:])):
                raise ValueError("ego_path times must be strictly increasing")
            if times[0] > 0.0 or times[-1] < self.duration:
                raise ValueError("ego_path must cover [0, duration]")

    @property
    def n_frames(self) -> int:
        return int(math.floor(self.duration * self.rate + 1e-9)) + 1

    def frame_time(self, frame: int) -> float:
        return frame / self.rate

    @property
    def primary_ids(self) -> List[int]:
        return [a.id for a in self.agents if a.primary]

    @cached_property
    def _ego_table(self) -> np.ndarray:
        path = np.asarray(self.ego_path, dtype=float).reshape(-1, 4)
        path = path.copy()
        path[:, 3] = np.unwrap(np.radians(path[:, 3]))
        return path


@dataclass(frozen=True)
class AgentState:
    id: int
    class_label: ClassLabel
    position: Tuple[float, float]
    yaw: float
    speed: float
    yaw_rate: float
    size: Tuple[float, float, float]
    primary: bool = False
    visible: bool = True

    @property
    def velocity(self) -> Tuple[float, float]:
        return self.speed * math.cos(self.yaw), self.speed * math.sin(self.yaw)


@dataclass(frozen=True)
class WorldState:
    t: float
    frame: int
    ego: EgoPose
    agents: Tuple[AgentState, ...]


def frame_rng(seed: int, frame: int, stream: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), int(frame), int(stream)])


def world_at(scenario: Scenario, t: float) -> WorldState:
    """
    Ground-truth state at scenario time t.

    Raises:
        ScenarioTimeError: t outside [0, duration]
    """
    if not (0.0 <= t <= scenario.duration + 1e-9):
        raise ScenarioTimeError(f"t = {t} outside scenario range [0, {scenario.duration}]")
    table = scenario._ego_table
    if table.shape[0] == 1:
        ex, ey, eyaw = table[0, 1], table[0, 2], table[0, 3]
    else:
        ex = float(np.interp(t, table[:, 0], table[:, 1]))
        ey = float(np.interp(t, table[:, 0], table[:, 2]))
        eyaw = float(np.interp(t, table[:, 0], table[:, 3]))
    ego = EgoPose((float(ex), float(ey)), wrap_angle(eyaw), t)

    agents = []
    for script in scenario.agents:
        if not script.active(t):
            continue
        x, y, yaw, speed, yaw_rate = script.state_at(t)
        agents.append(AgentState(script.id, script.class_label, (x, y), yaw, speed, yaw_rate,
                                 script.size, script.primary, script.visible(t)))
    frame = int(round(t * scenario.rate))
    return WorldState(t=t, frame=frame, ego=ego, agents=tuple(agents))


def truth_record(world: WorldState) -> Dict[str, Any]:
    return round_floats({
        "t": world.t,
        "agents": [{
            "id": a.id, "class": a.class_label.value, "x": a.position[0], "y": a.position[1],
            "yaw": a.yaw, "v": a.speed, "size": list(a.size), "primary": a.primary,
        } for a in world.agents],
        "ego": {"x": world.ego.position[0], "y": world.ego.position[1], "yaw": world.ego.heading},
    })


def agent_pose_lidar(agent: AgentState, ego: EgoPose, rig: SensorRig) -> Pose:
    """Pose mapping the agent's box frame (origin at the box center) into the LiDAR frame."""
    local_xy = ego.to_local(np.asarray(agent.position))
    yaw_vehicle = agent.yaw - ego.heading
    box_to_vehicle = Pose.from_yaw(yaw_vehicle, (local_xy[0], local_xy[1], agent.size[2] / 2.0))
    return rig.ego_extrinsic.inverse().compose(box_to_vehicle)


def cuboid_corners(size: Sequence[float]) -> np.ndarray:
    """Eight corners of a centered cuboid (box frame)."""
    half = np.asarray(size, dtype=float) / 2.0
    signs = np.array([[sx, sy, sz] for sx in (1, -1) for sy in (1, -1) for sz in (1, -1)], dtype=float)
    return signs * half


CUBOID_EDGES = [(a, b) for a in range(8) for b in range(a + 1, 8)
                if bin(a ^ b).count("1") == 1]


def _ray_box_distance(directions: np.ndarray, pose: Pose, size: Sequence[float]) -> np.ndarray:
    """Entry distance of rays from the LiDAR origin into an oriented box (inf when missed)."""
    half = np.asarray(size, dtype=float) / 2.0
    origin = pose.inverse().translation
    d_local = directions @ pose.rotation
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / d_local
        t1 = (-half - origin) * inv
        t2 = (half - origin) * inv
    lo = np.fmin(t1, t2)
    hi = np.fmax(t1, t2)
    lo = np.where(np.isnan(lo), -np.inf, lo)
    hi = np.where(np.isnan(hi), np.inf, hi)
    t_near = lo.max(axis=1)
    t_far = hi.min(axis=1)
    hit = (t_far >= t_near) & (t_near > 0.0)
    return np.where(hit, t_near, np.inf)


def render_lidar(world: WorldState, rig: SensorRig, noise: NoiseSpec, seed: int = 0) -> Tuple[PointCloud, np.ndarray]:
    """
    Ray-cast one LiDAR sweep.

    Returns:
        (point cloud in the LiDAR frame, per-point label: agent id or -1 for ground)
    """
    directions = rig.lidar.ray_directions
    max_range = rig.lidar.max_range
    best = np.full(directions.shape[0], np.inf)
    labels = np.full(directions.shape[0], GROUND_LABEL, dtype=np.int64)

    down = directions[:, 2] < 0.0
    with np.errstate(divide="ignore"):
        t_ground = np.where(down, rig.ground_z / directions[:, 2], np.inf)
    best = np.minimum(best, t_ground)

    for agent in world.agents:
        if not agent.visible:
            continue
        t_hit = _ray_box_distance(directions, agent_pose_lidar(agent, world.ego, rig), agent.size)
        closer = t_hit < best
        best[closer] = t_hit[closer]
        labels[closer] = agent.id

    keep = best <= max_range
    ranges = best[keep]
    labels = labels[keep]
    sigma = noise.lidar_range_sigma
    if sigma > 0.0:
        rng = frame_rng(seed, world.frame, STREAM_LIDAR)
        ranges = ranges + np.clip(rng.normal(0.0, sigma, ranges.shape[0]), -3.0 * sigma, 3.0 * sigma)
    points = directions[keep] * ranges[:, None]
    return PointCloud(points, timestamp=world.t), labels


def silhouette_polygon(pose: Pose, size: Sequence[float], cam: CameraModel) -> Optional[np.ndarray]:
    """Projected convex silhouette (k, 2) of a box, clipped at the near plane; None when not in front."""
    corners_cam = cam.extrinsic.compose(pose).apply(cuboid_corners(size))
    z = corners_cam[:, 2]
    kept = [corners_cam[i] for i in range(8) if z[i] >= NEAR_CLIP]
    if not kept:
        return None
    for a, b in CUBOID_EDGES:
        if (z[a] >= NEAR_CLIP) != (z[b] >= NEAR_CLIP):
            s = (NEAR_CLIP - z[a]) / (z[b] - z[a])
            kept.append(corners_cam[a] + s * (corners_cam[b] - corners_cam[a]))
    pts = np.asarray(kept)
    uv = np.stack([cam.fx * pts[:, 0] / pts[:, 2] + cam.cx, cam.fy * pts[:, 1] / pts[:, 2] + cam.cy], axis=1)
    try:
        hull = ConvexHull(uv)
    except QhullError:
        return None
    return uv[hull.vertices]


def rasterize_convex(polygon: np.ndarray, width: int, height: int) -> np.ndarray:
    """
    Conservative rasterization: pixel (col, row) is set when the square
    [col, col+1] x [row, row+1] intersects the convex polygon (CCW vertices).
    """
    mask = np.zeros((height, width), dtype=bool)
    lo = np.floor(polygon.min(axis=0)).astype(int)
    hi = np.floor(polygon.max(axis=0)).astype(int)
    c0, r0 = max(lo[0], 0), max(lo[1], 0)
    c1, r1 = min(hi[0], width - 1), min(hi[1], height - 1)
    if c1 < c0 or r1 < r0:
        return mask
    cols, rows = np.meshgrid(np.arange(c0, c1 + 1, dtype=float), np.arange(r0, r1 + 1, dtype=float))
    inside = np.ones(cols.shape, dtype=bool)
    edges = np.roll(polygon, -1, axis=0) - polygon
    for vertex, edge in zip(polygon, edges):
        normal = np.array([edge[1], -edge[0]])  # outward for counter-clockwise order
        nearest = normal[0] * cols + normal[1] * rows + min(normal[0], 0.0) + min(normal[1], 0.0)
        inside &= nearest <= normal @ vertex
    mask[r0:r1 + 1, c0:c1 + 1] = inside
    return mask


def _adjust_mask(mask: np.ndarray, amount: int) -> np.ndarray:
    if amount > 0:
        return ndimage.binary_dilation(mask, iterations=amount)
    if amount < 0:
        return ndimage.binary_erosion(mask, iterations=-amount)
    return mask


def _detection_from_mask(camera_id: int, label: ClassLabel, score: float, mask: np.ndarray) -> Optional[Detection2D]:
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    if rows.size == 0:
        return None
    r0, r1, c0, c1 = rows[0], rows[-1] + 1, cols[0], cols[-1] + 1
    return Detection2D(camera_id=camera_id, class_label=label, score=score,
                       box2d=PixelRect(float(c0), float(r0), float(c1), float(r1)),
                       mask=mask[r0:r1, c0:c1].copy())


def render_label_image(world: WorldState, rig: SensorRig, cam: CameraModel) -> np.ndarray:
    """Agent-id image of one camera (-1 = background), nearer agents painted last."""
    image = np.full((cam.height, cam.width), -1, dtype=np.int64)
    painted = []
    for agent in world.agents:
        if not agent.visible:
            continue
        pose = agent_pose_lidar(agent, world.ego, rig)
        depth = float(cam.extrinsic.apply(pose.translation)[2])
        polygon = silhouette_polygon(pose, agent.size, cam)
        if polygon is not None:
            painted.append((depth, agent.id, polygon))
    for _, agent_id, polygon in sorted(painted, key=lambda p: (-p[0], p[1])):
        image[rasterize_convex(polygon, cam.width, cam.height)] = agent_id
    if cam.roi_rows is not None:
        top, bottom = cam.roi_rows
        image[:top] = -1
        image[bottom:] = -1
    return image


def render_detections(world: WorldState, rig: SensorRig, noise: NoiseSpec, seed: int = 0,
                      render_rig: Optional[SensorRig] = None) -> Tuple[List[List[Detection2D]], List[List[int]]]:
    """
    Simulated instance-segmentation output of every camera.

    Args:
        world: World state
        rig: Nominal rig (detections are expressed in its cameras)
        noise: Noise model
        seed: Scenario seed
        render_rig: Rig the masks are actually rendered with (miscalibration); defaults to `rig`

    Returns:
        (per-camera detections, per-camera agent ids parallel to the detections)
    """
    render_rig = render_rig or rig
    rng = frame_rng(seed, world.frame, STREAM_DETECTIONS)
    classes = {a.id: a.class_label for a in world.agents}
    detections, identities = [], []
    for cam_id, cam in enumerate(render_rig.cameras):
        image = render_label_image(world, render_rig, cam)
        cam_dets, cam_ids = [], []
        for agent in sorted(world.agents, key=lambda a: a.id):
            jitter = int(rng.integers(-noise.mask_jitter_px, noise.mask_jitter_px + 1))
            dropped = rng.random() < noise.detection_dropout
            score = float(np.clip(rng.beta(*noise.score_beta), 0.0, 1.0))
            mask = image == agent.id
            if dropped or not mask.any():
                continue
            mask = _adjust_mask(mask, noise.mask_dilate_erode + jitter)
            if cam.roi_rows is not None:
                mask[:cam.roi_rows[0]] = False
                mask[cam.roi_rows[1]:] = False
            det = _detection_from_mask(cam_id, classes[agent.id], score, mask)
            if det is not None:
                cam_dets.append(det)
                cam_ids.append(agent.id)
        detections.append(cam_dets)
        identities.append(cam_ids)
    return detections, identities


def perturb_rig(rig: SensorRig, rotation_deg: float, translation_m: float, rng: np.random.Generator) -> SensorRig:
    """Rig whose camera extrinsics carry a random small miscalibration."""
    if rotation_deg == 0.0 and translation_m == 0.0:
        return rig
    cameras = []
    for cam in rig.cameras:
        delta_r = Rotation.from_rotvec(rng.normal(0.0, math.radians(rotation_deg), 3)).as_matrix()
        delta_t = rng.normal(0.0, translation_m, 3)
        extrinsic = Pose(delta_r, delta_t).compose(cam.extrinsic)
        cameras.append(CameraModel(fx=cam.fx, fy=cam.fy, cx=cam.cx, cy=cam.cy, width=cam.width,
                                   height=cam.height, extrinsic=extrinsic, hfov=cam.hfov,
                                   roi_rows=cam.roi_rows, name=cam.name))
    return SensorRig(cameras=tuple(cameras), lidar=rig.lidar, ego_extrinsic=rig.ego_extrinsic)


def noisy_ego(world: WorldState, noise: NoiseSpec, seed: int = 0) -> EgoPose:
    """Ego pose as reported to the tracker (GNSS/IMU noise applied)."""
    xy_sigma, yaw_sigma = noise.ego_pose_sigma
    if xy_sigma == 0.0 and yaw_sigma == 0.0:
        return world.ego
    rng = frame_rng(seed, world.frame, STREAM_EGO)
    dx, dy = rng.normal(0.0, xy_sigma, 2) if xy_sigma > 0 else (0.0, 0.0)
    dyaw = rng.normal(0.0, yaw_sigma) if yaw_sigma > 0 else 0.0
    x, y = world.ego.position
    return EgoPose((x + dx, y + dy), world.ego.heading + dyaw, world.ego.timestamp)


def _parse_noise(reader: TableReader) -> NoiseSpec:
    d = NoiseSpec()
    extrinsic = reader.vector("extrinsic_perturb", d.extrinsic_perturb, length=2)
    score_beta = reader.vector("score_beta", d.score_beta, length=2)
    ego_sigma = reader.vector("ego_pose_sigma", d.ego_pose_sigma, length=2)
    spec = dict(
        lidar_range_sigma=reader.number("lidar_range_sigma", d.lidar_range_sigma, minimum=0.0),
        mask_dilate_erode=reader.integer("mask_dilate_erode", d.mask_dilate_erode),
        mask_jitter_px=reader.integer("mask_jitter_px", d.mask_jitter_px, minimum=0),
        detection_dropout=reader.number("detection_dropout", d.detection_dropout, minimum=0.0, maximum=1.0),
    )
    reader.finish()
    for key, value in (("extrinsic_perturb", extrinsic), ("ego_pose_sigma", ego_sigma)):
        if min(value) < 0:
            raise reader.error(key, "must be >= 0")
    if min(score_beta) <= 0:
        raise reader.error("score_beta", "must be > 0")
    return NoiseSpec(extrinsic_perturb=extrinsic, score_beta=score_beta, ego_pose_sigma=ego_sigma, **spec)


def _parse_agent(reader: TableReader) -> AgentScript:
    agent_id = reader.integer("id", None, minimum=0)
    if agent_id is None:
        raise reader.error("id", "required")
    class_name = reader.string("class", None, choices=[c.value for c in ClassLabel])
    if class_name is None:
        raise reader.error("class", "required")
    size = reader.vector("size", None, length=3)
    if size is None:
        raise reader.error("size", "required")
    if min(size) <= 0:
        raise reader.error("size", "components must be > 0")
    motion = reader.string("motion", None, choices=[m.value for m in AgentMotion])
    if motion is None:
        raise reader.error("motion", "required")
    waypoints = reader.raw("waypoints", [])
    if not isinstance(waypoints, list) or not all(isinstance(w, list) and len(w) == 3 for w in waypoints):
        raise reader.error("waypoints", "expected a list of [t, x, y]")
    occluded = reader.raw("occluded", [])
    if not isinstance(occluded, list) or not all(isinstance(w, list) and len(w) == 2 for w in occluded):
        raise reader.error("occluded", "expected a list of [t_start, t_end]")
    kwargs = dict(
        start=reader.vector("start", (0.0, 0.0), length=2),
        heading_deg=reader.number("heading_deg", 0.0),
        speed=reader.number("speed", 0.0, minimum=0.0),
        turn_rate_deg=reader.number("turn_rate_deg", 0.0),
        spawn=reader.number("spawn", 0.0, minimum=0.0),
        despawn=reader.number("despawn", None),
        primary=reader.boolean("primary", False),
    )
    if kwargs["despawn"] is None:
        kwargs["despawn"] = math.inf
    reader.finish()
    if motion == AgentMotion.CONSTANT_TURN.value and kwargs["turn_rate_deg"] == 0.0:
        raise reader.error("turn_rate_deg", "must be non-zero for constant-turn")
    try:
        return AgentScript(id=agent_id, class_label=ClassLabel(class_name), size=size, motion=AgentMotion(motion),
                           waypoints=tuple(tuple(float(v) for v in w) for w in waypoints),
                           occluded=tuple((float(a), float(b)) for a, b in occluded), **kwargs)
    except ValueError as e:
        raise ConfigError(f"{reader.name}: {e}") from None


def scenario_from_dict(raw: Dict[str, Any], name: str = "scenario") -> Scenario:
    """
    Build a Scenario from parsed TOML.

    Raises:
        ConfigError: malformed value, naming the key
    """
    top = TableReader("scenario", raw)
    scenario_name = top.string("name", name)
    seed = top.integer("seed", 0, minimum=0)
    duration = top.number("duration", None, minimum=0.0)
    if duration is None:
        raise top.error("duration", "required")
    rate = top.number("rate", 10.0, minimum=0.0, exclusive_min=True)
    ego_path = top.raw("ego_path", [[0.0, 0.0, 0.0, 0.0]])
    if not isinstance(ego_path, list) or not ego_path or not all(
            isinstance(p, list) and len(p) == 4 for p in ego_path):
        raise top.error("ego_path", "expected a list of [t, x, y, yaw_deg]")
    noise = _parse_noise(top.table_of("noise"))
    agent_tables = top.raw("agent", [])
    if not isinstance(agent_tables, list):
        raise top.error("agent", "expected an array of tables ([[agent]])")
    agents = tuple(_parse_agent(TableReader(f"agent[{i}]", t)) for i, t in enumerate(agent_tables))
    top.finish()
    try:
        return Scenario(name=scenario_name, seed=seed, duration=duration, rate=rate,
                        ego_path=tuple(tuple(float(v) for v in p) for p in ego_path),
                        agents=agents, noise=noise)
    except ValueError as e:
        raise ConfigError(f"scenario: {e}") from None


def load_scenario(path: str) -> Scenario:
    scenario = scenario_from_dict(read_toml(path), name=os.path.splitext(os.path.basename(path))[0])
    logger.info(f"Loaded scenario '{scenario.name}' from {path}: {len(scenario.agents)} agents, "
                f"{scenario.n_frames} frames at {scenario.rate:g} Hz")
    return scenario
