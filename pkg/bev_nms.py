"""
Per-class axis-aligned BEV non-maximum suppression, restricted to the
azimuth sectors seen by more than one camera.
"""
import logging
from collections import defaultdict
from typing import Dict, List, NamedTuple, Optional, Sequence

import numpy as np

from box_estimation import Box3D, box_corners_bev
from rig_geometry import AzimuthInterval, SensorRig, camera_overlap_sectors

logger = logging.getLogger(__name__)

DEFAULT_IOU_THRESHOLD = 0.3


class BevRect(NamedTuple):
    x_min: float
    y_min: float
    x_max: float
    y_max: float

    @property
    def area(self) -> float:
        return max(self.x_max - self.x_min, 0.0) * max(self.y_max - self.y_min, 0.0)


def bev_footprint_aabb(box: Box3D) -> BevRect:
    """Axis-aligned bounds of the rotated footprint."""
    corners = box_corners_bev(box)
    lo, hi = corners.min(axis=0), corners.max(axis=0)
    return BevRect(float(lo[0]), float(lo[1]), float(hi[0]), float(hi[1]))


def aabb_iou(a: BevRect, b: BevRect) -> float:
    ix = min(a.x_max, b.x_max) - max(a.x_min, b.x_min)
    iy = min(a.y_max, b.y_max) - max(a.y_min, b.y_min)
    if ix <= 0.0 or iy <= 0.0:
        return 0.0
    inter = ix * iy
    union = a.area + b.area - inter
    return float(inter / union) if union > 0.0 else 0.0


def in_overlap_sector(box: Box3D, sectors: Sequence[AzimuthInterval]) -> bool:
    """True when the box center azimuth falls in one of the sectors."""
    azimuth = box.azimuth
    return any(bool(sector.contains(azimuth)) for sector in sectors)


def suppress(boxes: Sequence[Box3D], rig: Optional[SensorRig] = None,
             iou_threshold: float = DEFAULT_IOU_THRESHOLD,
             sectors: Optional[Sequence[AzimuthInterval]] = None) -> List[Box3D]:
    """
    Remove duplicate boxes produced by adjacent cameras.

    Args:
        boxes: Boxes in the LiDAR frame
        rig: Rig defining the camera-overlap sectors
        iou_threshold: A box is suppressed when its IoU with a kept box exceeds this
        sectors: Precomputed overlap sectors (take precedence over `rig`)

    Returns:
        The surviving boxes, in input order
    """
    if not 0.0 <= iou_threshold <= 1.0:
        raise ValueError(f"iou_threshold must be in [0, 1], got {iou_threshold}")
    if sectors is None:
        if rig is None:
            raise ValueError("suppress needs either a rig or precomputed sectors")
        sectors = camera_overlap_sectors(rig)

    by_class: Dict[str, List[int]] = defaultdict(list)
    for i, box in enumerate(boxes):
        if in_overlap_sector(box, sectors):
            by_class[box.class_label.value].append(i)

    removed = np.zeros(len(boxes), dtype=bool)
    rects = {}
    for label, indices in by_class.items():
        order = sorted(indices, key=lambda i: (-boxes[i].score, boxes[i].range, boxes[i].camera_id, i))
        for i in order:
            rects[i] = bev_footprint_aabb(boxes[i])
        for pos, i in enumerate(order):
            if removed[i]:
                continue
            for j in order[pos + 1:]:
                if not removed[j] and aabb_iou(rects[i], rects[j]) > iou_threshold:
                    removed[j] = True

    if removed.any():
        logger.debug(f"NMS removed {int(removed.sum())} of {len(boxes)} boxes")
    return [box for box, gone in zip(boxes, removed) if not gone]
