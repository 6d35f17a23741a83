"""
3D box estimation from the LiDAR points of one instance.

Three stages: instance segmentation (ground removal + largest Euclidean
cluster), center estimation (centroid normalization) and amodal box fitting
(a BEV rectangle on a convex-hull edge, minimum-area unless an L-shaped
outline sits on the sides of another one, completed with class size priors).
The estimator sits behind the BoxEstimator protocol so a learned model can
replace the geometric one.
"""
import math
import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, Mapping, NamedTuple, Optional, Protocol, Sequence, Tuple

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components
from scipy.spatial import ConvexHull, QhullError, cKDTree

from fusion_association import ClassLabel, InstancePoints
from rig_geometry import Pose
from utils import wrap_angle

logger = logging.getLogger(__name__)

DEFAULT_GROUND_MARGIN = 0.15
DEFAULT_CLUSTER_RADIUS = 0.7
FALLBACK_SCORE_FACTOR = 0.5
AREA_TIE_RTOL = 1e-9
# a point within OUTLINE_TOLERANCE of a side counts as part of the outline
OUTLINE_TOLERANCE = 0.1
OUTLINE_MIN_FRACTION = 0.9
OUTLINE_MIN_POINTS = 12


class EmptyInstanceError(ValueError):
    """Raised when segmentation leaves no point of the instance."""


class AmodalMode(str, Enum):
    SYMMETRIC = "symmetric"
    ANCHORED = "anchored"


@dataclass(frozen=True)
class SizePrior:
    """Class size prior (length, width, height) used to clamp fitted boxes."""
    class_label: ClassLabel
    mean_size: Tuple[float, float, float]
    min_size: Tuple[float, float, float]
    max_size: Tuple[float, float, float]

    def __post_init__(self):
        for lo, mean, hi in zip(self.min_size, self.mean_size, self.max_size):
            if not (0 < lo <= mean <= hi):
                raise ValueError(f"{self.class_label}: size prior must satisfy 0 < min <= mean <= max")

    @classmethod
    def from_mean(cls, class_label: ClassLabel, mean_size: Sequence[float], spread: float = 0.4) -> "SizePrior":
        mean = tuple(float(v) for v in mean_size)
        return cls(ClassLabel(class_label), mean,
                   tuple(v * (1.0 - spread) for v in mean),
                   tuple(v * (1.0 + spread) for v in mean))


DEFAULT_PRIORS: Dict[ClassLabel, SizePrior] = {
    ClassLabel.CAR: SizePrior.from_mean(ClassLabel.CAR, (4.0, 1.8, 1.6)),
    ClassLabel.PEDESTRIAN: SizePrior.from_mean(ClassLabel.PEDESTRIAN, (0.8, 0.8, 1.75)),
    ClassLabel.CYCLIST: SizePrior.from_mean(ClassLabel.CYCLIST, (1.8, 0.8, 1.75)),
}


@dataclass(frozen=True, eq=False)
class Box3D:
    """Oriented cuboid; yaw is the heading of the length axis about +z."""
    center: np.ndarray
    size: Tuple[float, float, float]
    yaw: float
    class_label: ClassLabel
    score: float = 1.0
    camera_id: int = -1

    def __post_init__(self):
        center = np.asarray(self.center, dtype=float).reshape(3)
        if not np.all(np.isfinite(center)):
            raise ValueError("box center must be finite")
        size = tuple(float(v) for v in self.size)
        if len(size) != 3 or min(size) <= 0:
            raise ValueError(f"box size components must be > 0, got {size}")
        center.setflags(write=False)
        object.__setattr__(self, "center", center)
        object.__setattr__(self, "size", size)
        object.__setattr__(self, "yaw", wrap_angle(float(self.yaw)))
        object.__setattr__(self, "class_label", ClassLabel(self.class_label))

    @property
    def range(self) -> float:
        return float(math.hypot(self.center[0], self.center[1]))

    @property
    def azimuth(self) -> float:
        return float(math.atan2(self.center[1], self.center[0]))


def box_corners_bev(box: Box3D) -> np.ndarray:
    """Footprint corners (4, 2), counter-clockwise from front-left."""
    length, width, _ = box.size
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    local = np.array([[length, width], [-length, width], [-length, -width], [length, -width]]) / 2.0
    rot = np.array([[c, -s], [s, c]])
    return local @ rot.T + box.center[:2]


def transform_box(box: Box3D, pose: Pose) -> Box3D:
    """Re-express a box in another frame; only the yaw part of the rotation is kept."""
    return Box3D(pose.apply(box.center), box.size, box.yaw + pose.yaw, box.class_label,
                 score=box.score, camera_id=box.camera_id)


def segment_instance(points, ground_z: float, ground_margin: float = DEFAULT_GROUND_MARGIN,
                     cluster_radius: float = DEFAULT_CLUSTER_RADIUS) -> np.ndarray:
    """
    Keep the points that belong to the object itself.

    Drops points at or below ground_z + ground_margin, then keeps the largest
    single-linkage cluster (link distance <= cluster_radius).

    Raises:
        EmptyInstanceError: nothing survives the ground filter
    """
    pts = points.points if isinstance(points, InstancePoints) else np.asarray(points, dtype=float)
    pts = pts.reshape(-1, 3)
    pts = pts[pts[:, 2] > ground_z + ground_margin]
    if pts.shape[0] == 0:
        raise EmptyInstanceError("all instance points filtered as ground")
    if pts.shape[0] == 1:
        return pts

    pairs = cKDTree(pts).query_pairs(cluster_radius, output_type="ndarray")
    n = pts.shape[0]
    graph = coo_matrix((np.ones(len(pairs)), (pairs[:, 0], pairs[:, 1])), shape=(n, n)) if len(pairs) \
        else coo_matrix((n, n))
    _, labels = connected_components(graph, directed=False)
    largest = int(np.argmax(np.bincount(labels)))
    return pts[labels == largest]


def estimate_center(points: np.ndarray) -> np.ndarray:
    """Centroid of the segmented points; fitting runs on points minus this center."""
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    if pts.shape[0] == 0:
        raise EmptyInstanceError("cannot estimate the center of an empty point set")
    return pts.mean(axis=0)


class HullEdgeRectangles(NamedTuple):
    """Enclosing rectangles aligned with each convex-hull edge (one entry per edge)."""
    dirs: np.ndarray
    normals: np.ndarray
    a_min: np.ndarray
    a_max: np.ndarray
    b_min: np.ndarray
    b_max: np.ndarray

    @classmethod
    def of(cls, xy: np.ndarray) -> "HullEdgeRectangles":
        """
        Raises:
            QhullError: degenerate (collinear or coincident) input
        """
        hull = ConvexHull(xy)
        vertices = xy[hull.vertices]
        edges = np.roll(vertices, -1, axis=0) - vertices
        lengths = np.linalg.norm(edges, axis=1)
        keep = lengths > 0
        dirs = edges[keep] / lengths[keep, None]
        normals = np.stack([-dirs[:, 1], dirs[:, 0]], axis=1)
        along = vertices @ dirs.T      # (n_vertices, n_edges)
        across = vertices @ normals.T
        return cls(dirs, normals, along.min(axis=0), along.max(axis=0), across.min(axis=0), across.max(axis=0))

    @property
    def areas(self) -> np.ndarray:
        return (self.a_max - self.a_min) * (self.b_max - self.b_min)

    def side_distances(self, xy: np.ndarray) -> np.ndarray:
        """(n_points, n_edges) distance of every point to the nearest side of every rectangle."""
        along = xy @ self.dirs.T
        across = xy @ self.normals.T
        gaps = np.minimum(np.minimum(along - self.a_min, self.a_max - along),
                          np.minimum(across - self.b_min, self.b_max - across))
        return np.maximum(gaps, 0.0)

    def tie_break(self, xy: np.ndarray, candidates: np.ndarray) -> int:
        """
        Smallest-area candidate; near-equal areas are resolved by how close the
        points lie to the sides, then by the longer rectangle. All keys are
        invariant under rotation of the input.
        """
        areas = self.areas[candidates]
        candidates = candidates[areas <= areas.min() * (1.0 + AREA_TIE_RTOL) + 1e-15]
        if len(candidates) > 1:
            closeness = self.side_distances(xy)[:, candidates].sum(axis=0)
            scale = math.sqrt(max(float(self.areas[candidates].min()), 0.0)) * len(xy)
            candidates = candidates[closeness <= closeness.min() + AREA_TIE_RTOL * max(scale, 1.0)]
        if len(candidates) > 1:
            long_side = np.maximum(self.a_max - self.a_min, self.b_max - self.b_min)[candidates]
            candidates = candidates[long_side >= long_side.max() * (1.0 - AREA_TIE_RTOL)]
        return int(candidates[0])

    def rectangle(self, k: int) -> Tuple[np.ndarray, np.ndarray, float, float]:
        center = self.dirs[k] * (self.a_min[k] + self.a_max[k]) / 2.0 \
            + self.normals[k] * (self.b_min[k] + self.b_max[k]) / 2.0
        return center, self.dirs[k], float(self.a_max[k] - self.a_min[k]), float(self.b_max[k] - self.b_min[k])


def min_area_rectangle(xy: np.ndarray) -> Tuple[np.ndarray, np.ndarray, float, float]:
    """
    Minimum-area enclosing rectangle of planar points.

    Every hull edge direction is tried (the optimum has a side collinear with
    a hull edge).

    Returns:
        (center (2,), edge direction (2,), extent along edge, extent along normal)

    Raises:
        QhullError: degenerate (collinear or coincident) input
    """
    xy = np.asarray(xy, dtype=float)
    rects = HullEdgeRectangles.of(xy)
    return rects.rectangle(rects.tie_break(xy, np.arange(len(rects.dirs))))


def footprint_rectangle(xy: np.ndarray) -> Tuple[np.ndarray, np.ndarray, float, float]:
    """
    BEV footprint of an instance: the minimum-area rectangle, unless most points
    are off its sides while another hull-edge rectangle has them on its sides.

    A sampled L-shaped outline (two faces of a vehicle) has a nearly triangular
    hull, and the rectangle on its long diagonal can have the smaller area.

    Raises:
        QhullError: degenerate (collinear or coincident) input
    """
    xy = np.asarray(xy, dtype=float)
    rects = HullEdgeRectangles.of(xy)
    everything = np.arange(len(rects.dirs))
    k = rects.tie_break(xy, everything)
    if len(xy) >= OUTLINE_MIN_POINTS:
        on_sides = (rects.side_distances(xy) <= OUTLINE_TOLERANCE).sum(axis=0)
        needed = OUTLINE_MIN_FRACTION * len(xy)
        if on_sides[k] < needed <= on_sides.max():
            k = rects.tie_break(xy, everything[on_sides == on_sides.max()])
    return rects.rectangle(k)


def _clamp(value: float, lo: float, mean: float, hi: float, mode: AmodalMode) -> float:
    if value < lo:
        return mean if mode is AmodalMode.ANCHORED else lo
    return min(value, hi)


def _prior_misfit(length: float, width: float, prior: SizePrior) -> float:
    l_mean, w_mean, _ = prior.mean_size
    return ((length - l_mean) / l_mean) ** 2 + ((width - w_mean) / w_mean) ** 2


def _complete_interval(lo: float, hi: float, extent: float, sensor: float, mode: AmodalMode) -> Tuple[float, float]:
    """Grow or shrink the visible interval [lo, hi] to `extent`."""
    visible = hi - lo
    if extent <= visible or mode is AmodalMode.SYMMETRIC:
        mid = (lo + hi) / 2.0
        return mid - extent / 2.0, mid + extent / 2.0
    # the face nearest the sensor is the one that was seen
    if abs(sensor - lo) <= abs(sensor - hi):
        return lo, lo + extent
    return hi - extent, hi


def fit_amodal_box(points: np.ndarray, prior: SizePrior, mode: AmodalMode = AmodalMode.SYMMETRIC,
                   sensor_origin: Sequence[float] = (0.0, 0.0, 0.0), score: float = 1.0,
                   camera_id: int = -1) -> Box3D:
    """
    Fit an oriented amodal box to segmented points.

    Args:
        points: (N, 3) segmented points in the LiDAR frame
        prior: Size prior of the object class
        mode: How clamped-up components are completed
        sensor_origin: Sensor position, used by the anchored completion
        score: Score given to the box (halved on the degenerate fallback)
        camera_id: Source camera

    Returns:
        Box3D with length >= width and yaw in (-pi/2, pi/2]
    """
    mode = AmodalMode(mode)
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    centroid = estimate_center(pts)
    local = pts - centroid

    try:
        if local.shape[0] < 3:
            raise QhullError("fewer than three points")
        rect_center, edge_dir, extent_edge, extent_normal = footprint_rectangle(local[:, :2])
        if min(extent_edge, extent_normal) <= 1e-9:
            raise QhullError("zero-width footprint")
    except QhullError as e:
        logger.debug(f"{prior.class_label.value}: degenerate BEV footprint ({e}); using prior fallback")
        return Box3D(centroid, prior.mean_size, 0.0, prior.class_label,
                     score * FALLBACK_SCORE_FACTOR, camera_id)

    normal_dir = np.array([-edge_dir[1], edge_dir[0]])
    (l_lo, w_lo, h_lo), (l_mean, w_mean, h_mean), (l_hi, w_hi, h_hi) = \
        prior.min_size, prior.mean_size, prior.max_size

    long_dir, short_dir = (edge_dir, normal_dir) if extent_edge >= extent_normal else (normal_dir, edge_dir)
    long_vis, short_vis = max(extent_edge, extent_normal), min(extent_edge, extent_normal)

    # long visible edge as length, unless the swapped assignment fits the prior strictly better
    length_dir, width_dir, length_vis, width_vis = long_dir, short_dir, long_vis, short_vis
    swapped_length = _clamp(short_vis, l_lo, l_mean, l_hi, AmodalMode.SYMMETRIC)
    swapped_width = _clamp(long_vis, w_lo, w_mean, w_hi, AmodalMode.SYMMETRIC)
    if swapped_length >= swapped_width:
        direct_misfit = _prior_misfit(_clamp(long_vis, l_lo, l_mean, l_hi, AmodalMode.SYMMETRIC),
                                      _clamp(short_vis, w_lo, w_mean, w_hi, AmodalMode.SYMMETRIC), prior)
        if _prior_misfit(swapped_length, swapped_width, prior) < direct_misfit - 1e-12:
            length_dir, width_dir, length_vis, width_vis = short_dir, long_dir, short_vis, long_vis

    length = _clamp(length_vis, l_lo, l_mean, l_hi, mode)
    width = _clamp(width_vis, w_lo, w_mean, w_hi, mode)
    if length < width:
        length, width = width, length
        length_dir, width_dir = width_dir, length_dir
        length_vis, width_vis = width_vis, length_vis

    sensor_xy = np.asarray(sensor_origin, dtype=float)[:2] - centroid[:2]
    s_len = float(rect_center @ length_dir)
    s_wid = float(rect_center @ width_dir)
    len_lo, len_hi = _complete_interval(s_len - length_vis / 2.0, s_len + length_vis / 2.0, length,
                                        float(sensor_xy @ length_dir), mode)
    wid_lo, wid_hi = _complete_interval(s_wid - width_vis / 2.0, s_wid + width_vis / 2.0, width,
                                        float(sensor_xy @ width_dir), mode)
    center_xy = length_dir * (len_lo + len_hi) / 2.0 + width_dir * (wid_lo + wid_hi) / 2.0

    z_lo, z_hi = float(local[:, 2].min()), float(local[:, 2].max())
    height_vis = z_hi - z_lo
    height = _clamp(height_vis, h_lo, h_mean, h_hi, mode)
    if height > height_vis and mode is AmodalMode.ANCHORED:
        # the bottom is what the ground filter removed
        z_lo = z_hi - height
    else:
        z_lo = (z_lo + z_hi - height) / 2.0
    center_z = z_lo + height / 2.0

    yaw = math.atan2(length_dir[1], length_dir[0])
    if yaw <= -math.pi / 2.0:
        yaw += math.pi
    elif yaw > math.pi / 2.0:
        yaw -= math.pi

    center = centroid + np.array([center_xy[0], center_xy[1], center_z])
    return Box3D(center, (length, width, height), yaw, prior.class_label, score, camera_id)


class BoxEstimator(Protocol):
    """Anything that turns an instance's points into an optional Box3D."""

    def estimate(self, instance: InstancePoints) -> Optional[Box3D]:
        ...


@dataclass
class GeometricBoxEstimator:
    """Classical segment -> center -> amodal box estimator."""
    priors: Mapping[ClassLabel, SizePrior] = field(default_factory=lambda: dict(DEFAULT_PRIORS))
    ground_z: float = -1.8
    ground_margin: float = DEFAULT_GROUND_MARGIN
    cluster_radius: float = DEFAULT_CLUSTER_RADIUS
    amodal_mode: AmodalMode = AmodalMode.SYMMETRIC
    sensor_origin: Tuple[float, float, float] = (0.0, 0.0, 0.0)

    def estimate(self, instance: InstancePoints) -> Optional[Box3D]:
        return estimate(instance, self.priors, self.ground_z, ground_margin=self.ground_margin,
                        cluster_radius=self.cluster_radius, amodal_mode=self.amodal_mode,
                        sensor_origin=self.sensor_origin)


def estimate(instance: InstancePoints, priors: Mapping[ClassLabel, SizePrior], ground_z: float,
             ground_margin: float = DEFAULT_GROUND_MARGIN, cluster_radius: float = DEFAULT_CLUSTER_RADIUS,
             amodal_mode: AmodalMode = AmodalMode.SYMMETRIC,
             sensor_origin: Sequence[float] = (0.0, 0.0, 0.0)) -> Optional[Box3D]:
    """
    Run segmentation, centering and amodal fitting for one instance.

    Returns:
        The box (score = detection score, class and camera propagated) or None
        when segmentation leaves nothing
    """
    det = instance.detection
    prior = priors.get(det.class_label) or DEFAULT_PRIORS[det.class_label]
    try:
        segmented = segment_instance(instance.points, ground_z, ground_margin, cluster_radius)
    except EmptyInstanceError as e:
        logger.debug(f"Camera {det.camera_id}: dropping {det.class_label.value} detection ({e})")
        return None
    return fit_amodal_box(segmented, prior, mode=amodal_mode, sensor_origin=sensor_origin,
                          score=det.score, camera_id=det.camera_id)
