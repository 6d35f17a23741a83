"""
Sequence metrics of tracker output against simulated ground truth.
"""
import math
import logging
from dataclasses import dataclass, field
from typing import Any, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from utils import rotation_2d, wrap_angle

logger = logging.getLogger(__name__)

TIMESTAMP_TOLERANCE = 1e-6
METRIC_COLUMNS = ["sequence", "mean_distance_m", "mean_heading_rad", "mean_speed_mps",
                  "matched_fraction", "n_matched", "n_missed", "n_false_tracks"]
SERIES_COLUMNS = ["t", "track_id", "agent_id", "distance_m", "heading_rad", "speed_mps"]


class TimestampMismatchError(ValueError):
    """Track and truth logs do not share frame timestamps."""


class NoMatchesError(ValueError):
    """No track was ever matched to a ground-truth agent."""


@dataclass(frozen=True)
class Entity:
    """Planar object state in the global frame."""
    id: int
    x: float
    y: float
    yaw: float
    v: float


@dataclass(frozen=True)
class MatchedPair:
    track: Entity
    truth: Entity

    @property
    def distance(self) -> float:
        return math.hypot(self.track.x - self.truth.x, self.track.y - self.truth.y)


@dataclass
class FrameCorrespondence:
    t: float
    pairs: List[MatchedPair] = field(default_factory=list)
    missed: List[int] = field(default_factory=list)        # truth ids without a track
    false_tracks: List[int] = field(default_factory=list)  # track ids without a truth agent
    primary_ids: Tuple[int, ...] = ()


def greedy_match(tracks: Sequence[Entity], truths: Sequence[Entity], cap: float) -> Tuple[List[MatchedPair], List[int], List[int]]:
    """
    Greedy nearest-neighbour matching in BEV.

    Pairs are taken in increasing distance (ties: track id, then truth id);
    pairs farther than `cap` are never matched.

    Returns:
        (pairs, unmatched truth ids, unmatched track ids)
    """
    candidates = []
    for tr in tracks:
        for gt in truths:
            d = math.hypot(tr.x - gt.x, tr.y - gt.y)
            if d <= cap:
                candidates.append((d, tr.id, gt.id, tr, gt))
    candidates.sort(key=lambda c: c[:3])
    used_tracks, used_truth, pairs = set(), set(), []
    for _, tid, gid, tr, gt in candidates:
        if tid in used_tracks or gid in used_truth:
            continue
        used_tracks.add(tid)
        used_truth.add(gid)
        pairs.append(MatchedPair(tr, gt))
    missed = [gt.id for gt in truths if gt.id not in used_truth]
    false_tracks = [tr.id for tr in tracks if tr.id not in used_tracks]
    return pairs, missed, false_tracks


def _tracks_to_global(records: Iterable[Dict[str, Any]], ego: Dict[str, float]) -> List[Entity]:
    rot = rotation_2d(ego["yaw"])
    origin = np.array([ego["x"], ego["y"]])
    entities = []
    for rec in records:
        xy = rot @ np.array([rec["x"], rec["y"]]) + origin
        entities.append(Entity(int(rec["id"]), float(xy[0]), float(xy[1]),
                               wrap_angle(rec["yaw"] + ego["yaw"]), float(rec["v"])))
    return entities


def match_tracks_to_truth(track_log: Sequence[Dict[str, Any]], truth_log: Sequence[Dict[str, Any]],
                          match_cap_m: float = 2.0) -> List[FrameCorrespondence]:
    """
    Per-frame correspondence between a track log (vehicle frame) and a truth log (global frame).

    Raises:
        TimestampMismatchError: the logs have different frames
    """
    if len(track_log) != len(truth_log):
        raise TimestampMismatchError(f"track log has {len(track_log)} frames, truth log {len(truth_log)}")
    frames = []
    for track_rec, truth_rec in zip(track_log, truth_log):
        if abs(track_rec["t"] - truth_rec["t"]) > TIMESTAMP_TOLERANCE:
            raise TimestampMismatchError(f"track frame t={track_rec['t']} vs truth frame t={truth_rec['t']}")
        tracks = _tracks_to_global(track_rec.get("tracks", []), truth_rec["ego"])
        truths = [Entity(int(a["id"]), float(a["x"]), float(a["y"]), float(a["yaw"]), float(a["v"]))
                  for a in truth_rec.get("agents", [])]
        pairs, missed, false_tracks = greedy_match(tracks, truths, match_cap_m)
        primary = tuple(int(a["id"]) for a in truth_rec.get("agents", []) if a.get("primary"))
        frames.append(FrameCorrespondence(float(truth_rec["t"]), pairs, missed, false_tracks, primary))
    return frames


def heading_error(track_yaw: float, truth_yaw: float, flip_forgiveness: bool = False) -> float:
    """Absolute heading difference in [0, pi] (in [0, pi/2] with flip forgiveness)."""
    err = abs(wrap_angle(track_yaw - truth_yaw))
    if flip_forgiveness:
        err = min(err, math.pi - err)
    return err


@dataclass
class SequenceErrors:
    mean_distance_m: float
    mean_heading_rad: float
    mean_speed_mps: float
    matched_fraction: float
    n_matched: int
    n_missed: int
    n_false_tracks: int
    series: pd.DataFrame

    def to_row(self, sequence: str) -> Dict[str, Any]:
        return {
            "sequence": sequence,
            "mean_distance_m": self.mean_distance_m,
            "mean_heading_rad": self.mean_heading_rad,
            "mean_speed_mps": self.mean_speed_mps,
            "matched_fraction": self.matched_fraction,
            "n_matched": self.n_matched,
            "n_missed": self.n_missed,
            "n_false_tracks": self.n_false_tracks,
        }


def sequence_errors(correspondence: Sequence[FrameCorrespondence], agent_ids: Optional[Sequence[int]] = None,
                    flip_forgiveness: bool = False) -> SequenceErrors:
    """
    Mean distance, heading and speed errors over matched entries.

    Args:
        correspondence: Output of match_tracks_to_truth
        agent_ids: Agents scored; defaults to the primary agents if any are flagged, else all
        flip_forgiveness: Forgive 180 degree heading flips

    Raises:
        NoMatchesError: nothing matched
    """
    if agent_ids is None:
        flagged = sorted({i for frame in correspondence for i in frame.primary_ids})
        agent_ids = flagged or None
    selected = None if agent_ids is None else set(agent_ids)

    rows = []
    n_missed = 0
    n_false = 0
    for frame in correspondence:
        n_missed += sum(1 for i in frame.missed if selected is None or i in selected)
        n_false += len(frame.false_tracks)
        for pair in frame.pairs:
            if selected is not None and pair.truth.id not in selected:
                continue
            rows.append({
                "t": frame.t,
                "track_id": pair.track.id,
                "agent_id": pair.truth.id,
                "distance_m": pair.distance,
                "heading_rad": heading_error(pair.track.yaw, pair.truth.yaw, flip_forgiveness),
                "speed_mps": abs(pair.track.v - pair.truth.v),
            })
    if not rows:
        raise NoMatchesError("no track matched any scored ground-truth agent")

    series = pd.DataFrame(rows, columns=SERIES_COLUMNS)
    n_matched = len(series)
    result = SequenceErrors(
        mean_distance_m=float(series["distance_m"].mean()),
        mean_heading_rad=float(series["heading_rad"].mean()),
        mean_speed_mps=float(series["speed_mps"].mean()),
        matched_fraction=n_matched / (n_matched + n_missed),
        n_matched=n_matched,
        n_missed=n_missed,
        n_false_tracks=n_false,
        series=series,
    )
    logger.info(f"Matched {n_matched} entries ({result.matched_fraction:.1%}): "
                f"distance {result.mean_distance_m:.3f} m, heading {result.mean_heading_rad:.4f} rad, "
                f"speed {result.mean_speed_mps:.3f} m/s")
    return result


def unmatched_row(sequence: str) -> Dict[str, Any]:
    """Metrics row of a sequence in which nothing matched."""
    row: Dict[str, Any] = {column: np.nan for column in METRIC_COLUMNS}
    row.update(sequence=sequence, matched_fraction=0.0, n_matched=0)
    return row


def metrics_frame(results: Dict[str, Optional[SequenceErrors]]) -> pd.DataFrame:
    rows = [unmatched_row(name) if r is None else r.to_row(name) for name, r in results.items()]
    return pd.DataFrame(rows, columns=METRIC_COLUMNS)


def write_metrics_csv(results: Dict[str, Optional[SequenceErrors]], path: str) -> pd.DataFrame:
    df = metrics_frame(results)
    df.to_csv(path, index=False, float_format="%.6f")
    logger.info(f"Saved metrics to {path}")
    return df


def write_series_csv(errors: SequenceErrors, path: str) -> pd.DataFrame:
    errors.series.to_csv(path, index=False, float_format="%.6f")
    return errors.series
