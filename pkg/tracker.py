"""
Multi-object tracker: one square-root UKF per track, ego-motion compensation,
chi-square gated Mahalanobis costs, Hungarian assignment and M-of-N track
management. Tracks live in the vehicle frame.
"""
import math
import logging
from dataclasses import dataclass, field
from enum import Enum
from functools import lru_cache
from typing import Any, Dict, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.stats import chi2

import sr_ukf
from box_estimation import Box3D
from config import TrackerSettings
from fusion_association import ClassLabel
from motion_models import MotionKind, MotionModel
from utils import rotation_2d, round_floats, wrap_angle

logger = logging.getLogger(__name__)

PEDESTRIAN_HEADING_MIN_SPEED = 0.5


class TrackStatus(str, Enum):
    TENTATIVE = "Tentative"
    CONFIRMED = "Confirmed"
    COASTING = "Coasting"


@dataclass(frozen=True)
class EgoPose:
    """Vehicle pose in the global frame."""
    position: Tuple[float, float]
    heading: float
    timestamp: float

    def __post_init__(self):
        position = tuple(float(v) for v in self.position)
        if len(position) != 2 or not all(math.isfinite(v) for v in position):
            raise ValueError("EgoPose position must be a finite 2-vector")
        if not (math.isfinite(self.heading) and math.isfinite(self.timestamp)):
            raise ValueError("EgoPose heading and timestamp must be finite")
        object.__setattr__(self, "position", position)
        object.__setattr__(self, "heading", wrap_angle(self.heading))

    def to_global(self, xy: np.ndarray) -> np.ndarray:
        """Vehicle-frame planar points (..., 2) to the global frame."""
        return np.asarray(xy, dtype=float) @ rotation_2d(self.heading).T + np.asarray(self.position)

    def to_local(self, xy: np.ndarray) -> np.ndarray:
        return (np.asarray(xy, dtype=float) - np.asarray(self.position)) @ rotation_2d(self.heading)


@dataclass(eq=False)
class Track:
    id: int
    class_label: ClassLabel
    model: MotionModel
    mean: np.ndarray
    sqrt_cov: np.ndarray
    box_size: Tuple[float, float, float]
    z: float
    yaw_obs: float
    hits: int = 1
    misses: int = 0
    age: int = 1
    status: TrackStatus = TrackStatus.TENTATIVE
    failed: bool = False

    @property
    def position(self) -> np.ndarray:
        return self.mean[:2].copy()

    @property
    def speed(self) -> float:
        return self.model.speed(self.mean)

    @property
    def yaw(self) -> float:
        """Heading reported for the track."""
        if self.model.kind is MotionKind.CTRV:
            return float(self.mean[3])
        if self.speed > PEDESTRIAN_HEADING_MIN_SPEED:
            return float(math.atan2(self.mean[3], self.mean[2]))
        return wrap_angle(self.yaw_obs)

    @property
    def covariance(self) -> np.ndarray:
        return self.sqrt_cov @ self.sqrt_cov.T

    def to_record(self) -> Dict[str, Any]:
        return round_floats({
            "id": self.id,
            "class": self.class_label.value,
            "x": float(self.mean[0]),
            "y": float(self.mean[1]),
            "z": float(self.z),
            "yaw": self.yaw,
            "v": self.speed,
            "size": [float(s) for s in self.box_size],
            "status": self.status.value,
        })


def _measurement(track: Track, obs: Box3D) -> np.ndarray:
    if track.model.kind is MotionKind.CTRV:
        return np.array([obs.center[0], obs.center[1], obs.yaw])
    return np.array([obs.center[0], obs.center[1]])


def _is_valid(mean: np.ndarray, sqrt_cov: np.ndarray) -> bool:
    return bool(np.all(np.isfinite(mean)) and np.all(np.isfinite(sqrt_cov)) and np.all(np.diag(sqrt_cov) > 0))


def birth(track_id: int, box: Box3D, model: MotionModel) -> Track:
    """Tentative track seeded from a box pose with zero speed."""
    mean, sqrt_cov = model.initial_state(float(box.center[0]), float(box.center[1]), box.yaw)
    return Track(id=track_id, class_label=box.class_label, model=model, mean=mean, sqrt_cov=sqrt_cov,
                 box_size=box.size, z=float(box.center[2]), yaw_obs=box.yaw)


def predict(track: Track, dt: float) -> Track:
    """Time update; a numerical failure marks the track as failed instead of raising."""
    try:
        mean, sqrt_cov = sr_ukf.predict(track.mean, track.sqrt_cov, track.model, dt)
    except (np.linalg.LinAlgError, FloatingPointError) as e:
        logger.warning(f"Track {track.id}: prediction failed ({e}); flagging for deletion")
        track.failed = True
        return track
    if not _is_valid(mean, sqrt_cov):
        logger.warning(f"Track {track.id}: non-finite predicted state; flagging for deletion")
        track.failed = True
        return track
    track.mean, track.sqrt_cov = mean, sqrt_cov
    return track


def _flip_heading(track: Track) -> None:
    """Re-express a CTRV state moving backwards as (yaw + pi, -v)."""
    jac = np.eye(track.model.dim_x)
    jac[2, 2] = -1.0
    track.mean = jac @ track.mean
    track.mean[3] = wrap_angle(track.mean[3] + math.pi)
    track.sqrt_cov = sr_ukf.tria((jac @ track.sqrt_cov).T)


def update(track: Track, obs: Box3D, innovation: Optional[sr_ukf.Innovation] = None,
           size_ema_alpha: float = 0.3, yaw_flip_speed: float = 1.0,
           confirm_hits: int = 3, confirm_window: int = 5) -> Track:
    """
    Measurement update with a box, plus size/z smoothing and lifecycle bookkeeping.

    A non-finite innovation rejects the observation and leaves the track untouched.
    """
    if obs.class_label != track.class_label:
        raise ValueError(f"track {track.id} ({track.class_label.value}) cannot take a {obs.class_label.value} box")
    try:
        mean, sqrt_cov = sr_ukf.update(track.mean, track.sqrt_cov, track.model, _measurement(track, obs),
                                       innovation=innovation)
    except (FloatingPointError, np.linalg.LinAlgError, ValueError) as e:
        logger.warning(f"Track {track.id}: observation rejected ({e})")
        return track
    if not _is_valid(mean, sqrt_cov):
        logger.warning(f"Track {track.id}: observation rejected (non-finite posterior)")
        return track

    track.mean, track.sqrt_cov = mean, sqrt_cov
    if track.model.kind is MotionKind.CTRV and track.mean[2] < -yaw_flip_speed:
        _flip_heading(track)

    a = size_ema_alpha
    track.box_size = tuple((1.0 - a) * old + a * new for old, new in zip(track.box_size, obs.size))
    track.z = (1.0 - a) * track.z + a * float(obs.center[2])
    track.yaw_obs = obs.yaw

    track.hits += 1
    track.misses = 0
    if track.status is TrackStatus.COASTING:
        track.status = TrackStatus.CONFIRMED
    elif track.status is TrackStatus.TENTATIVE and track.hits >= confirm_hits and track.age <= confirm_window:
        track.status = TrackStatus.CONFIRMED
    return track


def compensate_ego(tracks: Sequence[Track], pose_prev: EgoPose, pose_now: EgoPose) -> Sequence[Track]:
    """Re-express tracks from the previous vehicle frame in the current one."""
    if pose_now.timestamp < pose_prev.timestamp:
        raise ValueError("ego poses out of order")
    delta = pose_prev.heading - pose_now.heading
    offset = rotation_2d(pose_now.heading).T @ (np.asarray(pose_prev.position) - np.asarray(pose_now.position))
    if delta == 0.0 and not offset.any():
        return tracks
    rot = rotation_2d(delta)
    for track in tracks:
        jac = track.model.frame_change(delta)
        mean = jac @ track.mean
        mean[:2] = rot @ track.mean[:2] + offset
        if track.model.state_angle_index is not None:
            i = track.model.state_angle_index
            mean[i] = wrap_angle(track.mean[i] + delta)
        track.mean = mean
        track.sqrt_cov = sr_ukf.tria((jac @ track.sqrt_cov).T)
    return tracks


@lru_cache(maxsize=None)
def gate_threshold(dof: int, probability: float = 0.99) -> float:
    """Chi-square quantile used as the squared-Mahalanobis gate."""
    return float(chi2.ppf(probability, dof))


def mahalanobis_cost(track: Track, obs: Box3D, gate_probability: float = 0.99,
                     innovation: Optional[sr_ukf.Innovation] = None) -> float:
    """Squared Mahalanobis distance of a box to a track's prediction, or inf when gated out."""
    if obs.class_label != track.class_label:
        return math.inf
    try:
        inn = innovation or sr_ukf.predict_measurement(track.mean, track.sqrt_cov, track.model)
        if np.any(np.abs(np.diag(inn.sqrt_cov)) <= 0.0):
            return math.inf
        r = sr_ukf.measurement_residual(_measurement(track, obs), inn.z_pred, track.model.measurement_angle_index)
        d2 = sr_ukf.mahalanobis_sq(r, inn.sqrt_cov)
    except (np.linalg.LinAlgError, ValueError, FloatingPointError):
        return math.inf
    if not math.isfinite(d2) or d2 > gate_threshold(track.model.dim_z, gate_probability):
        return math.inf
    return d2


class Assignment(NamedTuple):
    pairs: List[Tuple[int, int]]
    unmatched_rows: List[int]
    unmatched_cols: List[int]


def _solve(costs: np.ndarray, finite: np.ndarray, rows: Sequence[int], cols: Sequence[int]) -> Tuple[List[Tuple[int, int]], int, float]:
    """Max-cardinality, then min-cost matching of finite entries on a sub-matrix."""
    if not rows or not cols:
        return [], 0, 0.0
    sub = costs[np.ix_(rows, cols)]
    sub_finite = finite[np.ix_(rows, cols)]
    if not sub_finite.any():
        return [], 0, 0.0
    big = (float(np.abs(sub[sub_finite]).sum()) + 1.0) * (min(len(rows), len(cols)) + 1)
    padded = np.where(sub_finite, sub, big)
    r_idx, c_idx = linear_sum_assignment(padded)
    pairs = [(rows[r], cols[c]) for r, c in zip(r_idx, c_idx) if sub_finite[r, c]]
    return pairs, len(pairs), float(sum(costs[r, c] for r, c in pairs))


def hungarian(costs: np.ndarray) -> Assignment:
    """
    Optimal assignment over finite entries (inf = not associable).

    The matching maximizes the number of pairs, then minimizes their total
    cost. Among optimal matchings the lexicographically smallest one is
    returned (row by row, lower column first, unmatched last).
    """
    costs = np.asarray(costs, dtype=float)
    if costs.ndim != 2:
        if costs.size:
            raise ValueError(f"cost matrix must be 2-D, got shape {costs.shape}")
        costs = costs.reshape(0, 0)
    n_rows, n_cols = costs.shape
    finite = np.isfinite(costs)
    all_rows, all_cols = list(range(n_rows)), list(range(n_cols))
    current, best_count, best_cost = _solve(costs, finite, all_rows, all_cols)

    def tol(value: float) -> float:
        return 1e-9 * max(1.0, abs(value))

    fixed: Dict[int, Optional[int]] = {}
    used_cols = set()
    fixed_cost = 0.0
    fixed_count = 0
    for r in all_rows:
        assigned = dict(current)
        current_col = assigned.get(r)
        candidates = [c for c in all_cols if finite[r, c] and c not in used_cols
                      and (current_col is None or c < current_col)]
        chosen = current_col
        for c in candidates:
            rest_rows = [x for x in all_rows if x > r]
            rest_cols = [y for y in all_cols if y not in used_cols and y != c]
            sub_pairs, sub_count, sub_cost = _solve(costs, finite, rest_rows, rest_cols)
            count = fixed_count + 1 + sub_count
            total = fixed_cost + costs[r, c] + sub_cost
            if count == best_count and abs(total - best_cost) <= tol(best_cost):
                chosen = c
                current = [(x, y) for x, y in fixed.items() if y is not None] + [(r, c)] + sub_pairs
                break
        fixed[r] = chosen
        if chosen is not None:
            used_cols.add(chosen)
            fixed_cost += costs[r, chosen]
            fixed_count += 1

    pairs = [(r, c) for r, c in fixed.items() if c is not None]
    matched_cols = {c for _, c in pairs}
    return Assignment(pairs=pairs,
                      unmatched_rows=[r for r in all_rows if fixed[r] is None],
                      unmatched_cols=[c for c in all_cols if c not in matched_cols])


def predict_trajectory(track: Track, horizon: float, dt: float) -> np.ndarray:
    """Noise-free future positions (k, 2) at dt, 2dt, ... up to horizon."""
    if dt <= 0 or horizon < 0:
        raise ValueError("predict_trajectory needs dt > 0 and horizon >= 0")
    steps = int(math.floor(horizon / dt + 1e-9))
    mean = track.mean.copy()
    out = np.empty((steps, 2))
    for k in range(steps):
        mean = track.model.predict_mean(mean, dt)
        out[k] = mean[:2]
    return out


@dataclass
class FrameReport:
    timestamp: float
    matches: List[Tuple[int, int]] = field(default_factory=list)  # (track id, detection index)
    births: List[int] = field(default_factory=list)
    deaths: List[int] = field(default_factory=list)
    tracks: List[Dict[str, Any]] = field(default_factory=list)

    def to_record(self) -> Dict[str, Any]:
        return {"t": round(self.timestamp, 6), "tracks": self.tracks}


class Tracker:
    """Track state machine for one sequence; `step` is not reentrant."""

    def __init__(self, settings: Optional[TrackerSettings] = None):
        self.settings = settings or TrackerSettings()
        self.tracks: List[Track] = []
        self._next_id = 1
        self._models = {label: self.settings.motion_model(label) for label in ClassLabel}

    @property
    def published_tracks(self) -> List[Track]:
        return [t for t in self.tracks if t.status is not TrackStatus.TENTATIVE]

    def step(self, detections: Sequence[Box3D], ego_prev: Optional[EgoPose], ego_now: Optional[EgoPose],
             dt: float, timestamp: Optional[float] = None) -> Tuple[List[Track], FrameReport]:
        """
        Advance the tracker by one frame.

        Args:
            detections: Boxes in the current vehicle frame
            ego_prev: Vehicle pose at the previous frame (None skips compensation)
            ego_now: Vehicle pose at this frame
            dt: Time since the previous frame
            timestamp: Frame time for the report (defaults to ego_now's)

        Returns:
            (all live tracks, frame report)
        """
        if dt <= 0:
            raise ValueError(f"dt must be > 0, got {dt}")
        s = self.settings
        t = timestamp if timestamp is not None else (ego_now.timestamp if ego_now else 0.0)
        report = FrameReport(timestamp=t)

        if ego_prev is not None and ego_now is not None:
            compensate_ego(self.tracks, ego_prev, ego_now)
        for track in self.tracks:
            predict(track, dt)
            track.age += 1

        live = [tr for tr in self.tracks if not tr.failed]
        innovations = []
        for track in live:
            try:
                innovations.append(sr_ukf.predict_measurement(track.mean, track.sqrt_cov, track.model))
            except (np.linalg.LinAlgError, FloatingPointError) as e:
                logger.warning(f"Track {track.id}: innovation failed ({e}); flagging for deletion")
                track.failed = True
                innovations.append(None)

        costs = np.full((len(live), len(detections)), math.inf)
        for i, track in enumerate(live):
            if innovations[i] is None:
                continue
            for j, det in enumerate(detections):
                costs[i, j] = mahalanobis_cost(track, det, s.gate_probability, innovations[i])
        assignment = hungarian(costs)

        for i, j in assignment.pairs:
            track = live[i]
            update(track, detections[j], innovations[i], size_ema_alpha=s.size_ema_alpha,
                   yaw_flip_speed=s.yaw_flip_speed, confirm_hits=s.confirm_hits,
                   confirm_window=s.confirm_window)
            report.matches.append((track.id, j))
        for i in assignment.unmatched_rows:
            track = live[i]
            track.misses += 1
            if track.status is TrackStatus.CONFIRMED:
                track.status = TrackStatus.COASTING

        for j in assignment.unmatched_cols:
            det = detections[j]
            track = birth(self._next_id, det, self._models[det.class_label])
            self._next_id += 1
            self.tracks.append(track)
            report.births.append(track.id)

        survivors = []
        for track in self.tracks:
            reason = None
            if track.failed:
                reason = "numerical failure"
            elif track.misses > s.max_misses:
                reason = f"{track.misses} consecutive misses"
            elif track.status is TrackStatus.TENTATIVE and track.age >= s.confirm_window:
                reason = f"unconfirmed after {track.age} frames"
            if reason is None:
                survivors.append(track)
            else:
                report.deaths.append(track.id)
                level = logging.WARNING if track.failed else logging.DEBUG
                logger.log(level, f"Deleting track {track.id} ({track.class_label.value}): {reason}")
        self.tracks = survivors

        report.tracks = [tr.to_record() for tr in self.published_tracks]
        logger.debug(f"t={t:.2f}: {len(report.matches)} matches, {len(report.births)} births, "
                     f"{len(report.deaths)} deaths, {len(self.tracks)} live tracks")
        return self.tracks, report
