"""
LiDAR-to-detection association.

Points are assigned to per-camera 2D detections either through their instance
masks (primary path) or through the frustum extruded from the detection box
(fallback path).
"""
import logging
from dataclasses import dataclass
from enum import Enum
from typing import Any, Dict, Iterable, List, Optional, Sequence

import numpy as np

from rig_geometry import CameraModel, PixelRect, PointCloud, project_points
from utils import read_jsonl, write_jsonl

logger = logging.getLogger(__name__)

DEFAULT_MIN_POINTS = 5


class ClassLabel(str, Enum):
    CAR = "Car"
    PEDESTRIAN = "Pedestrian"
    CYCLIST = "Cyclist"


class AssociationSource(str, Enum):
    MASK = "Mask"
    FRUSTUM = "Frustum"


@dataclass(frozen=True, eq=False)
class Detection2D:
    """
    Per-camera object hypothesis.

    `mask` covers the integer pixel extent of `box2d`: its element [r, c] is
    pixel (floor(x0) + c, floor(y0) + r).
    """
    camera_id: int
    class_label: ClassLabel
    score: float
    box2d: PixelRect
    mask: np.ndarray

    def __post_init__(self):
        box = PixelRect(*(float(v) for v in self.box2d))
        object.__setattr__(self, "box2d", box)
        object.__setattr__(self, "class_label", ClassLabel(self.class_label))
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"detection score {self.score} outside [0, 1]")
        mask = np.asarray(self.mask, dtype=bool)
        expected = (int(np.ceil(box.y1)) - int(np.floor(box.y0)),
                    int(np.ceil(box.x1)) - int(np.floor(box.x0)))
        if mask.shape != expected:
            raise ValueError(f"mask shape {mask.shape} does not match box extent {expected}")
        if not mask.any():
            raise ValueError("detection mask has no set pixel")
        mask.setflags(write=False)
        object.__setattr__(self, "mask", mask)

    @property
    def origin(self):
        """(col, row) of the mask's top-left pixel."""
        return int(np.floor(self.box2d.x0)), int(np.floor(self.box2d.y0))

    @property
    def mask_area(self) -> int:
        return int(np.count_nonzero(self.mask))


@dataclass(frozen=True, eq=False)
class InstancePoints:
    """LiDAR points attributed to one detection."""
    detection: Detection2D
    points: np.ndarray
    source: AssociationSource
    indices: Optional[np.ndarray] = None  # rows of the source cloud

    def __len__(self) -> int:
        return int(self.points.shape[0])


def _check_single_camera(detections: Sequence[Detection2D]) -> None:
    ids = {d.camera_id for d in detections}
    if len(ids) > 1:
        raise ValueError(f"detections from several cameras passed together: {sorted(ids)}")


def build_label_image(detections: Sequence[Detection2D], cam: CameraModel) -> np.ndarray:
    """
    Rasterize detection masks into an (H, W) index image (-1 = background).

    Where masks overlap, the detection with the smallest mask area wins (ties:
    lower detection index).
    """
    label = np.full((cam.height, cam.width), -1, dtype=np.int32)
    order = sorted(range(len(detections)), key=lambda i: (-detections[i].mask_area, -i))
    for i in order:
        det = detections[i]
        col0, row0 = det.origin
        h, w = det.mask.shape
        r0, c0 = max(row0, 0), max(col0, 0)
        r1, c1 = min(row0 + h, cam.height), min(col0 + w, cam.width)
        if r1 <= r0 or c1 <= c0:
            continue
        sub_mask = det.mask[r0 - row0:r1 - row0, c0 - col0:c1 - col0]
        label[r0:r1, c0:c1][sub_mask] = i
    return label


def associate_mask(cloud: PointCloud, detections: Sequence[Detection2D], cam: CameraModel,
                   min_points: int = DEFAULT_MIN_POINTS) -> List[InstancePoints]:
    """
    Assign points to detections whose mask covers their projection.

    Args:
        cloud: LiDAR cloud
        detections: Detections of one camera
        cam: The camera the detections come from
        min_points: Detections with fewer assigned points yield no entry

    Returns:
        InstancePoints in detection order
    """
    if len(cloud) == 0 or not detections:
        return []
    _check_single_camera(detections)

    uv, _, valid = project_points(cloud.points, cam)
    candidates = np.flatnonzero(valid)
    cols = np.floor(uv[candidates, 0]).astype(np.int64)
    rows = np.floor(uv[candidates, 1]).astype(np.int64)
    labels = build_label_image(detections, cam)[rows, cols]

    hit = labels >= 0
    point_idx, det_idx = candidates[hit], labels[hit]
    order = np.lexsort((point_idx, det_idx))
    point_idx, det_idx = point_idx[order], det_idx[order]
    bounds = np.searchsorted(det_idx, np.arange(len(detections) + 1))

    results = []
    for i, det in enumerate(detections):
        idx = point_idx[bounds[i]:bounds[i + 1]]
        if idx.size < min_points:
            logger.debug(f"Camera {det.camera_id}: detection {i} ({det.class_label.value}) "
                         f"has {idx.size} mask points, below {min_points}")
            continue
        results.append(InstancePoints(det, cloud.points[idx], AssociationSource.MASK, idx))
    return results


def frustum_membership(cloud: PointCloud, detections: Sequence[Detection2D], cam: CameraModel,
                       near: float = 0.5, far: Optional[float] = None) -> List[np.ndarray]:
    """Point indices inside each detection's frustum (no overlap resolution)."""
    far = np.inf if far is None else far
    uv, depth, _ = project_points(cloud.points, cam)
    in_depth = (depth > 0.0) & (depth >= near) & (depth <= far)
    members = []
    for det in detections:
        box = det.box2d
        inside = (in_depth & (uv[:, 0] >= box.x0) & (uv[:, 0] <= box.x1)
                  & (uv[:, 1] >= box.y0) & (uv[:, 1] <= box.y1))
        members.append(np.flatnonzero(inside))
    return members


def associate_frustum(cloud: PointCloud, detections: Sequence[Detection2D], cam: CameraModel,
                      min_points: int = DEFAULT_MIN_POINTS, near: float = 0.5,
                      far: Optional[float] = None, exclusive: bool = True) -> List[InstancePoints]:
    """
    Assign points to detections whose frustum contains them.

    A point inside several frustums goes to the detection whose mean member
    depth is closest to the point's own depth (ties: lower detection index).
    With `exclusive=False` raw membership is returned.
    """
    if len(cloud) == 0 or not detections:
        return []
    _check_single_camera(detections)

    members = frustum_membership(cloud, detections, cam, near=near, far=far)
    if exclusive:
        depth = cam.extrinsic.apply(cloud.points)[:, 2]
        mean_depth = np.array([depth[m].mean() if m.size else np.inf for m in members])
        point_idx = np.concatenate(members) if members else np.empty(0, dtype=np.int64)
        det_idx = np.concatenate([np.full(m.size, i, dtype=np.int64) for i, m in enumerate(members)])
        cost = np.abs(depth[point_idx] - mean_depth[det_idx])
        order = np.lexsort((det_idx, cost, point_idx))
        point_idx, det_idx = point_idx[order], det_idx[order]
        first = np.ones(point_idx.size, dtype=bool)
        first[1:] = point_idx[1:] != point_idx[:-1]
        point_idx, det_idx = point_idx[first], det_idx[first]
        members = [np.sort(point_idx[det_idx == i]) for i in range(len(detections))]

    results = []
    for det, idx in zip(detections, members):
        if idx.size < min_points:
            continue
        results.append(InstancePoints(det, cloud.points[idx], AssociationSource.FRUSTUM, idx))
    return results


def associate(cloud: PointCloud, detections: Sequence[Detection2D], cam: CameraModel,
              mode: str = "mask", min_points: int = DEFAULT_MIN_POINTS, near: float = 0.5,
              far: Optional[float] = None) -> List[InstancePoints]:
    """Dispatch to mask or frustum association."""
    if mode == "mask":
        return associate_mask(cloud, detections, cam, min_points=min_points)
    if mode == "frustum":
        return associate_frustum(cloud, detections, cam, min_points=min_points, near=near, far=far)
    raise ValueError(f"unknown association mode {mode!r}")


def encode_rle(mask: np.ndarray) -> List[int]:
    """Row-major run lengths of a boolean mask, alternating runs starting with zeros."""
    flat = np.asarray(mask, dtype=bool).ravel()
    if flat.size == 0:
        return []
    change = np.flatnonzero(flat[1:] != flat[:-1]) + 1
    boundaries = np.concatenate([[0], change, [flat.size]])
    runs = np.diff(boundaries).tolist()
    if flat[0]:
        runs.insert(0, 0)
    return [int(r) for r in runs]


def decode_rle(counts: Sequence[int], shape) -> np.ndarray:
    """Inverse of encode_rle."""
    total = int(np.prod(shape))
    if sum(counts) != total:
        raise ValueError(f"RLE counts sum to {sum(counts)}, expected {total}")
    values = np.arange(len(counts)) % 2 == 1
    return np.repeat(values, counts).reshape(shape)


def detection_to_record(det: Detection2D) -> Dict[str, Any]:
    return {
        "camera_id": det.camera_id,
        "class": det.class_label.value,
        "score": det.score,
        "box": list(det.box2d),
        "mask": encode_rle(det.mask),
    }


def detection_from_record(record: Dict[str, Any]) -> Detection2D:
    """Build a Detection2D from one JSON-lines row."""
    try:
        box = PixelRect(*(float(v) for v in record["box"]))
        shape = (int(np.ceil(box.y1)) - int(np.floor(box.y0)),
                 int(np.ceil(box.x1)) - int(np.floor(box.x0)))
        mask = decode_rle(record["mask"], shape)
        return Detection2D(
            camera_id=int(record["camera_id"]),
            class_label=ClassLabel(record["class"]),
            score=float(record["score"]),
            box2d=box,
            mask=mask,
        )
    except KeyError as e:
        raise ValueError(f"detection record missing field {e}") from e


def read_detections_jsonl(path: str) -> List[Detection2D]:
    detections = [detection_from_record(r) for r in read_jsonl(path)]
    logger.info(f"Loaded {len(detections)} detections from {path}")
    return detections


def write_detections_jsonl(detections: Iterable[Detection2D], path: str) -> int:
    return write_jsonl((detection_to_record(d) for d in detections), path)
