"""
Coordinate frames, camera models, projections and frustums for a
multi-camera + LiDAR rig.

Conventions: LiDAR and vehicle frames are right-handed with x forward, y left,
z up. Camera frames have z forward, x right, y down. A Pose maps points from
its source frame into its target frame: p_target = R @ p_source + t.
"""
import math
import logging
from dataclasses import dataclass, field
from functools import cached_property
from typing import List, NamedTuple, Optional, Sequence, Tuple

import numpy as np
from scipy.spatial.transform import Rotation

logger = logging.getLogger(__name__)

POSE_TOLERANCE = 1e-9
HFOV_TOLERANCE_DEG = 0.5
TWO_PI = 2.0 * math.pi


class InvalidDetectionError(ValueError):
    """Raised when a 2D detection rectangle cannot define a frustum."""


@dataclass(frozen=True, eq=False)
class Pose:
    """Rigid transform: rotation (orthonormal, det +1) and translation in meters."""
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        rotation = np.asarray(self.rotation, dtype=float).reshape(3, 3)
        translation = np.asarray(self.translation, dtype=float).reshape(3)
        if not np.all(np.isfinite(rotation)) or not np.all(np.isfinite(translation)):
            raise ValueError("Pose must be finite")
        if np.max(np.abs(rotation.T @ rotation - np.eye(3))) > POSE_TOLERANCE:
            raise ValueError("Pose rotation is not orthonormal")
        if abs(np.linalg.det(rotation) - 1.0) > POSE_TOLERANCE:
            raise ValueError("Pose rotation must have determinant +1")
        rotation.setflags(write=False)
        translation.setflags(write=False)
        object.__setattr__(self, "rotation", rotation)
        object.__setattr__(self, "translation", translation)

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_quaternion(cls, quat_wxyz: Sequence[float], translation: Sequence[float]) -> "Pose":
        """Build a pose from a [w, x, y, z] quaternion (normalized here) and a translation."""
        w, x, y, z = (float(q) for q in quat_wxyz)
        norm = math.sqrt(w * w + x * x + y * y + z * z)
        if norm == 0.0:
            raise ValueError("quaternion must be non-zero")
        rotation = Rotation.from_quat([x / norm, y / norm, z / norm, w / norm]).as_matrix()
        return cls(rotation, np.asarray(translation, dtype=float))

    @classmethod
    def from_yaw(cls, yaw: float, translation: Sequence[float] = (0.0, 0.0, 0.0)) -> "Pose":
        c, s = math.cos(yaw), math.sin(yaw)
        rotation = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
        return cls(rotation, np.asarray(translation, dtype=float))

    def as_quaternion(self) -> Tuple[float, float, float, float]:
        """Return the rotation as a [w, x, y, z] quaternion."""
        x, y, z, w = Rotation.from_matrix(self.rotation).as_quat()
        return (float(w), float(x), float(y), float(z))

    @property
    def yaw(self) -> float:
        """Heading of the rotated x axis projected on the xy plane."""
        return math.atan2(self.rotation[1, 0], self.rotation[0, 0])

    def compose(self, other: "Pose") -> "Pose":
        """Return self ∘ other: apply `other` first, then `self`."""
        return Pose(self.rotation @ other.rotation,
                    self.rotation @ other.translation + self.translation)

    def inverse(self) -> "Pose":
        rt = self.rotation.T
        return Pose(rt, -rt @ self.translation)

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Transform a 3-vector or an (N, 3) array of points."""
        pts = np.asarray(points, dtype=float)
        if pts.ndim == 1:
            return self.rotation @ pts + self.translation
        return pts @ self.rotation.T + self.translation

    def is_identity(self) -> bool:
        return bool(np.array_equal(self.rotation, np.eye(3)) and not np.any(self.translation))


class PixelRect(NamedTuple):
    """Pixel rectangle (x0, y0) - (x1, y1); x1/y1 are exclusive pixel bounds."""
    x0: float
    y0: float
    x1: float
    y1: float

    @property
    def width(self) -> float:
        return self.x1 - self.x0

    @property
    def height(self) -> float:
        return self.y1 - self.y0


@dataclass(frozen=True, eq=False)
class PointCloud:
    """Timestamped LiDAR returns in the LiDAR frame."""
    points: np.ndarray
    timestamp: float = 0.0
    intensity: Optional[np.ndarray] = None

    def __post_init__(self):
        points = np.asarray(self.points, dtype=float).reshape(-1, 3)
        if not np.all(np.isfinite(points)):
            raise ValueError("PointCloud coordinates must be finite")
        object.__setattr__(self, "points", points)
        if self.intensity is not None:
            intensity = np.asarray(self.intensity, dtype=float).reshape(-1)
            if intensity.shape[0] != points.shape[0]:
                raise ValueError("intensity must have one value per point")
            object.__setattr__(self, "intensity", intensity)

    def __len__(self) -> int:
        return int(self.points.shape[0])


@dataclass(frozen=True, eq=False)
class CameraModel:
    """Ideal pinhole camera with its LiDAR-to-camera extrinsic."""
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    extrinsic: Pose = field(default_factory=Pose.identity)
    hfov: Optional[float] = None  # degrees; derived from fx and width when omitted
    roi_rows: Optional[Tuple[int, int]] = None
    name: str = ""

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError(f"camera {self.name!r}: fx and fy must be > 0")
        if self.width <= 0 or self.height <= 0:
            raise ValueError(f"camera {self.name!r}: image size must be positive")
        if not (0 < self.cx < self.width) or not (0 < self.cy < self.height):
            raise ValueError(f"camera {self.name!r}: principal point must lie inside the image")
        derived = math.degrees(2.0 * math.atan(self.width / (2.0 * self.fx)))
        if self.hfov is None:
            object.__setattr__(self, "hfov", derived)
        elif abs(self.hfov - derived) > HFOV_TOLERANCE_DEG:
            raise ValueError(
                f"camera {self.name!r}: hfov {self.hfov:.3f} deg inconsistent with fx/width ({derived:.3f} deg)")
        if self.roi_rows is not None:
            top, bottom = self.roi_rows
            if not (0 <= top < bottom <= self.height):
                raise ValueError(f"camera {self.name!r}: roi_rows must satisfy 0 <= top < bottom <= height")

    @cached_property
    def optical_center(self) -> np.ndarray:
        """Camera center expressed in the LiDAR frame."""
        return -self.extrinsic.rotation.T @ self.extrinsic.translation

    @cached_property
    def azimuth(self) -> float:
        """Azimuth of the optical axis in the LiDAR frame, radians."""
        axis = self.extrinsic.rotation.T @ np.array([0.0, 0.0, 1.0])
        return math.atan2(axis[1], axis[0])

    def binned(self, factor: int) -> "CameraModel":
        """Return the camera seen through factor x factor pixel binning."""
        if factor < 1:
            raise ValueError("binning factor must be >= 1")
        if factor == 1:
            return self
        roi = None
        if self.roi_rows is not None:
            roi = (self.roi_rows[0] // factor, -(-self.roi_rows[1] // factor))
        return CameraModel(
            fx=self.fx / factor, fy=self.fy / factor,
            cx=self.cx / factor, cy=self.cy / factor,
            width=self.width // factor, height=self.height // factor,
            extrinsic=self.extrinsic, roi_rows=roi, name=self.name,
        )


def camera_rotation_from_azimuth(azimuth: float) -> np.ndarray:
    """LiDAR-to-camera rotation for a level camera looking along `azimuth`."""
    c, s = math.cos(azimuth), math.sin(azimuth)
    # rows: camera x (right), y (down), z (forward) expressed in the LiDAR frame
    return np.array([[s, -c, 0.0], [0.0, 0.0, -1.0], [c, s, 0.0]])


def camera_from_azimuth(azimuth: float, hfov_deg: float, width: int, height: int,
                        center: Sequence[float] = (0.0, 0.0, 0.0), name: str = "",
                        roi_rows: Optional[Tuple[int, int]] = None) -> CameraModel:
    """Build a level pinhole camera at `center` (LiDAR frame) looking along `azimuth`."""
    rotation = camera_rotation_from_azimuth(azimuth)
    translation = -rotation @ np.asarray(center, dtype=float)
    f = (width / 2.0) / math.tan(math.radians(hfov_deg) / 2.0)
    return CameraModel(fx=f, fy=f, cx=width / 2.0, cy=height / 2.0, width=width, height=height,
                       extrinsic=Pose(rotation, translation), roi_rows=roi_rows, name=name)


@dataclass(frozen=True, eq=False)
class LidarModel:
    """Multi-layer spinning LiDAR."""
    n_layers: int = 32
    vertical_angles: Tuple[float, ...] = tuple(np.linspace(-25.0, 15.0, 32).tolist())
    horizontal_resolution: float = 0.2
    max_range: float = 200.0
    range_noise_sigma: float = 0.03

    def __post_init__(self):
        angles = tuple(float(a) for a in self.vertical_angles)
        object.__setattr__(self, "vertical_angles", angles)
        if self.n_layers < 1 or len(angles) != self.n_layers:
            raise ValueError(f"expected {self.n_layers} vertical angles, got {len(angles)}")
        if any(b <= a for a, b in zip(angles, angles[1:])):
            raise ValueError("vertical angles must be strictly increasing")
        if not all(-90.0 < a < 90.0 for a in angles):
            raise ValueError("vertical angles must lie in (-90, 90) degrees")
        if self.max_range <= 0:
            raise ValueError("max_range must be > 0")
        if self.horizontal_resolution <= 0 or self.horizontal_resolution > 360.0:
            raise ValueError("horizontal_resolution must be in (0, 360]")
        if self.range_noise_sigma < 0:
            raise ValueError("range_noise_sigma must be >= 0")

    @classmethod
    def uniform(cls, n_layers: int, vertical_min_deg: float, vertical_max_deg: float,
                **kwargs) -> "LidarModel":
        angles = np.linspace(vertical_min_deg, vertical_max_deg, n_layers)
        return cls(n_layers=n_layers, vertical_angles=tuple(angles.tolist()), **kwargs)

    @property
    def n_azimuth_steps(self) -> int:
        return int(round(360.0 / self.horizontal_resolution))

    @property
    def min_vertical_spacing(self) -> float:
        if self.n_layers < 2:
            return float("inf")
        return float(np.min(np.diff(self.vertical_angles)))

    @cached_property
    def ray_directions(self) -> np.ndarray:
        """Unit direction of every (layer, azimuth step) ray, shape (n_layers * n_az, 3)."""
        elevations = np.radians(np.asarray(self.vertical_angles))
        azimuths = np.radians(np.arange(self.n_azimuth_steps) * self.horizontal_resolution)
        el, az = np.meshgrid(elevations, azimuths, indexing="ij")
        directions = np.stack([np.cos(el) * np.cos(az), np.cos(el) * np.sin(az), np.sin(el)], axis=-1)
        directions = directions.reshape(-1, 3)
        directions.setflags(write=False)
        return directions


@dataclass(frozen=True, eq=False)
class SensorRig:
    """Calibrated camera array plus LiDAR and the LiDAR-to-vehicle extrinsic."""
    cameras: Tuple[CameraModel, ...]
    lidar: LidarModel = field(default_factory=LidarModel)
    ego_extrinsic: Pose = field(default_factory=lambda: Pose(np.eye(3), np.array([0.0, 0.0, 1.8])))

    def __post_init__(self):
        object.__setattr__(self, "cameras", tuple(self.cameras))

    @property
    def lidar_height(self) -> float:
        return float(self.ego_extrinsic.translation[2])

    @property
    def ground_z(self) -> float:
        """Flat-world ground height expressed in the LiDAR frame."""
        return -self.lidar_height

    def validate(self) -> List[str]:
        """
        Check the rig coverage invariants.

        Returns:
            List of problems, empty when the rig covers 360 degrees with overlap
            between every adjacent camera pair.
        """
        problems = []
        if not self.cameras:
            return ["rig has no cameras"]
        intervals = [camera_interval(cam) for cam in self.cameras]
        covered = coverage_sectors(intervals, min_count=1)
        if not (len(covered) == 1 and covered[0].width >= TWO_PI - 1e-9):
            problems.append("camera fields of view do not cover 360 degrees")
        if len(self.cameras) > 1:
            order = sorted(range(len(self.cameras)), key=lambda i: self.cameras[i].azimuth % TWO_PI)
            for a, b in zip(order, order[1:] + order[:1]):
                cam_a, cam_b = self.cameras[a], self.cameras[b]
                gap = (cam_b.azimuth - cam_a.azimuth) % TWO_PI
                half_sum = math.radians(cam_a.hfov + cam_b.hfov) / 2.0
                if half_sum <= gap:
                    problems.append(f"cameras {a} and {b} do not overlap")
        return problems


class AzimuthInterval(NamedTuple):
    """Counter-clockwise azimuth interval starting at `start` in [0, 2pi)."""
    start: float
    width: float

    @property
    def end(self) -> float:
        return self.start + self.width

    def contains(self, azimuth) -> np.ndarray:
        if self.width >= TWO_PI:
            return np.ones(np.shape(azimuth), dtype=bool)
        return np.mod(np.asarray(azimuth, dtype=float) - self.start, TWO_PI) <= self.width


def camera_interval(cam: CameraModel) -> AzimuthInterval:
    """Azimuth interval (LiDAR frame) covered by the camera HFOV."""
    half = math.radians(cam.hfov) / 2.0
    return AzimuthInterval((cam.azimuth - half) % TWO_PI, 2.0 * half)


def coverage_sectors(intervals: Sequence[AzimuthInterval], min_count: int = 2) -> List[AzimuthInterval]:
    """
    Azimuth sectors covered by at least `min_count` of the given intervals.

    Args:
        intervals: Input intervals (start in radians, width in radians)
        min_count: Minimum number of covering intervals

    Returns:
        Maximal disjoint sectors sorted by start
    """
    intervals = [AzimuthInterval(iv.start % TWO_PI, iv.width) for iv in intervals if iv.width > 0]
    if not intervals:
        return []
    breaks = {0.0}
    for iv in intervals:
        if iv.width < TWO_PI:
            breaks.add(iv.start)
            breaks.add(iv.end % TWO_PI)
    breaks = sorted(b for b in breaks if 0.0 <= b < TWO_PI)
    arcs = []
    for i, start in enumerate(breaks):
        stop = breaks[i + 1] if i + 1 < len(breaks) else TWO_PI
        if stop - start <= 0.0:
            continue
        mid = 0.5 * (start + stop)
        count = sum(bool(iv.contains(mid)) for iv in intervals)
        arcs.append((start, stop, count >= min_count))

    if all(flag for _, _, flag in arcs):
        return [AzimuthInterval(0.0, TWO_PI)]

    merged: List[List[float]] = []
    for start, stop, flag in arcs:
        if not flag:
            continue
        if merged and abs(merged[-1][1] - start) < 1e-12:
            merged[-1][1] = stop
        else:
            merged.append([start, stop])
    # join a sector crossing azimuth 0
    if len(merged) > 1 and merged[0][0] == 0.0 and abs(merged[-1][1] - TWO_PI) < 1e-12:
        first = merged.pop(0)
        merged[-1][1] = TWO_PI + first[1]
    sectors = [AzimuthInterval(start, stop - start) for start, stop in merged]
    return sorted(sectors, key=lambda s: s.start)


def camera_overlap_sectors(rig: SensorRig) -> List[AzimuthInterval]:
    """Azimuth sectors (LiDAR frame) seen by two or more cameras."""
    return coverage_sectors([camera_interval(cam) for cam in rig.cameras], min_count=2)


def default_rig(n_cameras: int = 5, hfov_deg: float = 85.0, width: int = 640, height: int = 480,
                first_azimuth_deg: float = 0.0, lidar: Optional[LidarModel] = None,
                ego_extrinsic: Optional[Pose] = None, binning: int = 1,
                roi_rows: Optional[Tuple[int, int]] = None) -> SensorRig:
    """
    Evenly spaced camera ring around a central LiDAR.

    Args:
        n_cameras: Number of cameras, spaced 360/n degrees apart counter-clockwise
        hfov_deg: Horizontal field of view of every camera
        width: Image width in pixels (before binning)
        height: Image height in pixels (before binning)
        first_azimuth_deg: Azimuth of camera 0's optical axis
        lidar: LiDAR model (default 32 layers, 200 m)
        ego_extrinsic: LiDAR-to-vehicle pose (default 1.8 m above the rear axle)
        binning: Pixel binning factor applied to every camera
        roi_rows: Optional (top, bottom) row band kept for detection

    Returns:
        The assembled SensorRig
    """
    cameras = []
    for i in range(n_cameras):
        azimuth = math.radians(first_azimuth_deg + i * 360.0 / n_cameras)
        cam = camera_from_azimuth(azimuth, hfov_deg, width, height, name=f"cam{i}", roi_rows=roi_rows)
        cameras.append(cam.binned(binning))
    kwargs = {}
    if ego_extrinsic is not None:
        kwargs["ego_extrinsic"] = ego_extrinsic
    return SensorRig(cameras=tuple(cameras), lidar=lidar or LidarModel(), **kwargs)


def to_camera_frame(points: np.ndarray, cam: CameraModel) -> np.ndarray:
    """LiDAR-frame points (N, 3) expressed in the camera frame."""
    return cam.extrinsic.apply(np.asarray(points, dtype=float).reshape(-1, 3))


def project_points(points: np.ndarray, cam: CameraModel) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    Project LiDAR-frame points into a camera.

    Args:
        points: (N, 3) array in the LiDAR frame
        cam: Camera model

    Returns:
        Tuple of (uv (N, 2), depth (N,), valid (N,) bool); `valid` is False for
        points behind the camera or outside the image.
    """
    p_cam = to_camera_frame(points, cam)
    depth = p_cam[:, 2]
    in_front = depth > 0.0
    safe_depth = np.where(in_front, depth, 1.0)
    u = cam.fx * p_cam[:, 0] / safe_depth + cam.cx
    v = cam.fy * p_cam[:, 1] / safe_depth + cam.cy
    valid = in_front & (u >= 0.0) & (u < cam.width) & (v >= 0.0) & (v < cam.height)
    return np.stack([u, v], axis=1), depth, valid


def project_point(p: Sequence[float], cam: CameraModel) -> Optional[Tuple[float, float, float]]:
    """
    Project one LiDAR-frame point.

    Returns:
        (u, v, z_cam) or None when the point is behind the camera or outside the image
    """
    uv, depth, valid = project_points(np.asarray(p, dtype=float).reshape(1, 3), cam)
    if not valid[0]:
        return None
    return float(uv[0, 0]), float(uv[0, 1]), float(depth[0])


@dataclass(frozen=True, eq=False)
class Frustum:
    """Six half-spaces n . p >= d in the LiDAR frame (left, right, top, bottom, near, far)."""
    normals: np.ndarray
    offsets: np.ndarray
    near: float
    far: float

    def contains(self, points: np.ndarray) -> np.ndarray:
        pts = np.asarray(points, dtype=float).reshape(-1, 3)
        return np.all(pts @ self.normals.T - self.offsets >= 0.0, axis=1)


def build_frustum(box2d: Sequence[float], cam: CameraModel, near: float = 0.5,
                  far: float = 200.0) -> Frustum:
    """
    Extrude a pixel rectangle into a LiDAR-frame frustum.

    A point is inside iff its projection lies in the closed rectangle and
    near <= z_cam <= far.

    Raises:
        InvalidDetectionError: zero-area rectangle or rectangle outside the image
        ValueError: invalid near/far
    """
    x0, y0, x1, y1 = (float(v) for v in box2d)
    if not (x1 > x0 and y1 > y0):
        raise InvalidDetectionError(f"degenerate detection rectangle {box2d}")
    if x0 < 0 or y0 < 0 or x1 > cam.width or y1 > cam.height:
        raise InvalidDetectionError(f"detection rectangle {box2d} exceeds the image bounds")
    if not (0.0 < near < far):
        raise ValueError(f"frustum requires 0 < near < far, got near={near}, far={far}")

    # camera-frame half-spaces: u >= x0  <=>  fx*x - (x0 - cx)*z >= 0 (z > 0)
    cam_normals = np.array([
        [cam.fx, 0.0, -(x0 - cam.cx)],
        [-cam.fx, 0.0, (x1 - cam.cx)],
        [0.0, cam.fy, -(y0 - cam.cy)],
        [0.0, -cam.fy, (y1 - cam.cy)],
        [0.0, 0.0, 1.0],
        [0.0, 0.0, -1.0],
    ])
    cam_offsets = np.array([0.0, 0.0, 0.0, 0.0, near, -far])
    norms = np.linalg.norm(cam_normals, axis=1)
    cam_normals = cam_normals / norms[:, None]
    cam_offsets = cam_offsets / norms

    # n_c . (R p + t) >= d  <=>  (R^T n_c) . p >= d - n_c . t
    rotation, translation = cam.extrinsic.rotation, cam.extrinsic.translation
    normals = cam_normals @ rotation
    offsets = cam_offsets - cam_normals @ translation
    return Frustum(normals=normals, offsets=offsets, near=near, far=far)


def transform_cloud(cloud: PointCloud, pose: Pose) -> PointCloud:
    """Rigidly transform every point; timestamps and intensities are untouched."""
    if pose.is_identity():
        return PointCloud(cloud.points.copy(), cloud.timestamp, cloud.intensity)
    return PointCloud(pose.apply(cloud.points), cloud.timestamp, cloud.intensity)
