# run_pipeline.py
"""
Command-line entry point: simulate a scenario, run the fusion pipeline and the
tracker frame by frame, and evaluate against ground truth.

    python run_pipeline.py run --config configs/default.toml --scenario scenarios/roundabout.toml --out out/roundabout
    python run_pipeline.py bench --config configs/bench.toml --scenario scenarios/bench_20_agents.toml --frames 100
"""
import os
import sys
import time
import logging
import argparse
import dataclasses
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import pandas as pd

from bev_nms import suppress
from box_estimation import Box3D, BoxEstimator, GeometricBoxEstimator, transform_box
from config import ConfigError, PipelineConfig, load_app_config, load_pipeline_config
from evaluation import (NoMatchesError, SequenceErrors, match_tracks_to_truth, sequence_errors, write_metrics_csv,
                        write_series_csv)
from fusion_association import Detection2D, associate
from rig_geometry import PointCloud, camera_overlap_sectors
from scenario_sim import (STREAM_RIG, Scenario, frame_rng, load_scenario, noisy_ego, perturb_rig,
                          render_detections, render_lidar, truth_record, world_at)
from tracker import Tracker
from utils import flush_logging, format_duration, resolve_thread_count, save_text, setup_logging, write_jsonl
from visualizations import emit_bev_plot, error_series_figure

logger = logging.getLogger("PipelineRunner")

# --- Constants ---
STAGES = ["association", "estimation", "fanout", "nms", "tracker", "total"]
TRACKS_FILENAME = "tracks.jsonl"
TRUTH_FILENAME = "truth.jsonl"
METRICS_FILENAME = "metrics.csv"
SERIES_FILENAME = "series.csv"
TIMING_FILENAME = "timing.csv"
REPORT_FILENAME = "report.html"
SVG_DIRNAME = "bev"

EXIT_OK = 0
EXIT_RUNTIME_ERROR = 1
EXIT_BAD_INPUT = 2


@dataclass
class CameraResult:
    camera_id: int
    boxes: List[Box3D]
    association_s: float
    estimation_s: float


class FramePipeline:
    """Per-camera association and box estimation, merge, NMS and the move into the vehicle frame."""

    def __init__(self, config: PipelineConfig, estimator: Optional[BoxEstimator] = None, threads: int = 0):
        self.config = config
        self.rig = config.rig
        self.estimator = estimator or GeometricBoxEstimator(
            priors=dict(config.priors),
            ground_z=self.rig.ground_z,
            ground_margin=config.estimator.ground_margin,
            cluster_radius=config.estimator.cluster_radius,
            amodal_mode=config.estimator.amodal_mode,
        )
        self.sectors = camera_overlap_sectors(self.rig)
        self.threads = resolve_thread_count(threads, len(self.rig.cameras))
        self._executor: Optional[ThreadPoolExecutor] = None

    def __enter__(self) -> "FramePipeline":
        if self.threads > 1:
            self._executor = ThreadPoolExecutor(max_workers=self.threads, thread_name_prefix="camera")
        return self

    def __exit__(self, *exc) -> None:
        if self._executor is not None:
            self._executor.shutdown(wait=True)
            self._executor = None

    def process_camera(self, cloud: PointCloud, detections: Sequence[Detection2D], camera_id: int) -> CameraResult:
        cam = self.rig.cameras[camera_id]
        settings = self.config.association
        start = time.perf_counter()
        instances = associate(cloud, detections, cam, mode=settings.mode,
                              min_points=self.config.estimator.min_points,
                              near=settings.near, far=self.config.association_far) if detections else []
        associated = time.perf_counter()
        boxes = [box for box in (self.estimator.estimate(inst) for inst in instances) if box is not None]
        return CameraResult(camera_id, boxes, associated - start, time.perf_counter() - associated)

    def detect(self, cloud: PointCloud, detections: Sequence[Sequence[Detection2D]]) -> Tuple[List[Box3D], Dict[str, float]]:
        """
        Run one frame from raw sensor data to vehicle-frame boxes.

        Returns:
            (boxes after NMS in the vehicle frame, stage timings in milliseconds)
        """
        start = time.perf_counter()
        camera_ids = range(len(self.rig.cameras))
        if self._executor is not None:
            results = list(self._executor.map(lambda k: self.process_camera(cloud, detections[k], k), camera_ids))
        else:
            results = [self.process_camera(cloud, detections[k], k) for k in camera_ids]
        fanout_done = time.perf_counter()

        # merge is independent of completion order
        merged = [box for result in sorted(results, key=lambda r: r.camera_id) for box in result.boxes]
        kept = suppress(merged, iou_threshold=self.config.nms.iou_threshold, sectors=self.sectors)
        vehicle_boxes = [transform_box(box, self.rig.ego_extrinsic) for box in kept]
        done = time.perf_counter()

        if len(kept) < len(merged):
            logger.debug(f"NMS removed {len(merged) - len(kept)} of {len(merged)} boxes")
        timings = {
            "association": 1e3 * sum(r.association_s for r in results),
            "estimation": 1e3 * sum(r.estimation_s for r in results),
            "fanout": 1e3 * (fanout_done - start),
            "nms": 1e3 * (done - fanout_done),
        }
        return vehicle_boxes, timings


@dataclass
class SequenceOutput:
    track_log: List[dict]
    truth_log: List[dict]
    timing: pd.DataFrame


def simulate_sequence(config: PipelineConfig, scenario: Scenario, n_frames: Optional[int] = None,
                      threads: int = 0, snapshot_every: int = 0, snapshot_dir: Optional[str] = None) -> SequenceOutput:
    """
    Run the full pipeline over the first `n_frames` frames of a scenario.

    Raises:
        Any exception from the frame loop; the logs built so far are attached as `partial_output`
    """
    total_frames = scenario.n_frames if n_frames is None else min(n_frames, scenario.n_frames)
    noise = scenario.noise
    rig = config.rig
    render_rig = perturb_rig(rig, noise.extrinsic_perturb[0], noise.extrinsic_perturb[1],
                             frame_rng(scenario.seed, 0, STREAM_RIG))
    tracker = Tracker(config.tracker)
    track_log, truth_log, timing_rows = [], [], []
    prev_ego, prev_t = None, None

    with FramePipeline(config, threads=threads) as pipeline:
        try:
            for frame in range(total_frames):
                t = scenario.frame_time(frame)
                render_start = time.perf_counter()
                world = world_at(scenario, t)
                cloud, _ = render_lidar(world, rig, noise, scenario.seed)
                detections, _ = render_detections(world, rig, noise, scenario.seed, render_rig=render_rig)
                render_ms = 1e3 * (time.perf_counter() - render_start)

                boxes, timings = pipeline.detect(cloud, detections)
                ego_now = noisy_ego(world, noise, scenario.seed)
                dt = t - prev_t if prev_t is not None else 1.0 / scenario.rate
                tracker_start = time.perf_counter()
                _, report = tracker.step(boxes, prev_ego, ego_now, dt, timestamp=t)
                timings["tracker"] = 1e3 * (time.perf_counter() - tracker_start)
                timings["total"] = timings["fanout"] + timings["nms"] + timings["tracker"]
                prev_ego, prev_t = ego_now, t

                track_log.append(report.to_record())
                truth_log.append(truth_record(world))
                timing_rows.append({
                    "frame": frame, "t": round(t, 6), "n_points": len(cloud), "n_agents": len(world.agents),
                    "n_detections": sum(len(d) for d in detections), "n_boxes": len(boxes),
                    "render_ms": render_ms, **{f"{stage}_ms": timings[stage] for stage in STAGES},
                })
                logger.debug(f"Frame {frame}: {len(cloud)} points, {timing_rows[-1]['n_detections']} detections, "
                             f"{len(boxes)} boxes, {len(report.tracks)} published tracks")

                if snapshot_every and snapshot_dir and frame % snapshot_every == 0:
                    svg = emit_bev_plot(frame, report.tracks, truth_log[-1], rig)
                    save_text(svg, os.path.join(snapshot_dir, f"frame_{frame:05d}.svg"))
        except Exception as e:
            e.partial_output = SequenceOutput(track_log, truth_log, pd.DataFrame(timing_rows))
            raise

    return SequenceOutput(track_log, truth_log, pd.DataFrame(timing_rows))


def evaluate_sequence(config: PipelineConfig, output: SequenceOutput) -> Optional[SequenceErrors]:
    correspondence = match_tracks_to_truth(output.track_log, output.truth_log, config.evaluation.match_cap_m)
    try:
        return sequence_errors(correspondence, flip_forgiveness=config.evaluation.heading_flip_forgiveness)
    except NoMatchesError as e:
        logger.warning(f"Evaluation skipped: {e}")
        return None


def write_outputs(out_dir: str, name: str, output: SequenceOutput, errors: Optional[SequenceErrors],
                  report: bool = False) -> None:
    write_jsonl(output.track_log, os.path.join(out_dir, TRACKS_FILENAME))
    write_jsonl(output.truth_log, os.path.join(out_dir, TRUTH_FILENAME))
    output.timing.to_csv(os.path.join(out_dir, TIMING_FILENAME), index=False, float_format="%.3f")

    write_metrics_csv({name: errors}, os.path.join(out_dir, METRICS_FILENAME))
    if errors is not None:
        write_series_csv(errors, os.path.join(out_dir, SERIES_FILENAME))

    if report and errors is not None:
        fig = error_series_figure(errors.series)
        fig.write_html(os.path.join(out_dir, REPORT_FILENAME), include_plotlyjs="cdn")
        logger.info(f"Saved report to {os.path.join(out_dir, REPORT_FILENAME)}")


def _load_inputs(config_path: str, scenario_path: str, seed: Optional[int] = None) -> Tuple[PipelineConfig, Scenario]:
    config = load_pipeline_config(config_path)
    scenario = load_scenario(scenario_path)
    if seed is not None:
        scenario = dataclasses.replace(scenario, seed=seed)
    return config, scenario


def _report_bad_input(e: Exception) -> int:
    message = f"{type(e).__name__}: {e}"
    logger.error(message)
    print(message, file=sys.stderr)
    flush_logging()
    return EXIT_BAD_INPUT


def run(config_path: str, scenario_path: str, out_dir: Optional[str] = None, frames: Optional[int] = None,
        svg_every: Optional[int] = None, seed: Optional[int] = None, report: Optional[bool] = None) -> int:
    """
    Simulate, track and evaluate one scenario, writing every artifact to `out_dir`.
    `out_dir` defaults to FUSIONTRACK_OUT_DIR.

    Returns:
        Process exit status (0 ok, 1 runtime failure, 2 bad input)
    """
    try:
        app = load_app_config()
    except ConfigError as e:
        return _report_bad_input(e)
    out_dir = out_dir or app.out_dir
    os.makedirs(out_dir, exist_ok=True)
    setup_logging(app.log_level, os.path.join(out_dir, app.log_file))
    run_start = time.time()
    try:
        config, scenario = _load_inputs(config_path, scenario_path, seed)
        if frames is not None and frames < 1:
            raise ConfigError(f"--frames: must be >= 1, got {frames}")
        if svg_every is not None and svg_every < 0:
            raise ConfigError(f"--svg-every: must be >= 0, got {svg_every}")
    except (ConfigError, FileNotFoundError) as e:
        return _report_bad_input(e)

    every = config.output.svg_every if svg_every is None else svg_every
    want_report = config.output.report if report is None else report
    logger.info(f"--- Running '{scenario.name}' (seed {scenario.seed}) into {out_dir} ---")

    try:
        output = simulate_sequence(config, scenario, frames, threads=app.threads,
                                   snapshot_every=every, snapshot_dir=os.path.join(out_dir, SVG_DIRNAME))
        errors = evaluate_sequence(config, output)
        write_outputs(out_dir, scenario.name, output, errors, report=want_report)
    except Exception as e:
        logger.critical(f"Run failed: {e}", exc_info=True)
        partial = getattr(e, "partial_output", None)
        if partial is not None and partial.track_log:
            write_jsonl(partial.track_log, os.path.join(out_dir, TRACKS_FILENAME))
            write_jsonl(partial.truth_log, os.path.join(out_dir, TRUTH_FILENAME))
        flush_logging()
        return EXIT_RUNTIME_ERROR

    logger.info(f"--- Finished {len(output.track_log)} frames in {format_duration(time.time() - run_start)} ---")
    flush_logging()
    return EXIT_OK


def bench_summary(timing: pd.DataFrame) -> pd.DataFrame:
    """Per-stage p50/p95 latency table from a timing frame."""
    rows = []
    for stage in STAGES:
        column = timing[f"{stage}_ms"] if not timing.empty else pd.Series([0.0])
        rows.append({"stage": stage, "p50_ms": float(column.quantile(0.50)), "p95_ms": float(column.quantile(0.95))})
    return pd.DataFrame(rows, columns=["stage", "p50_ms", "p95_ms"])


def bench(config_path: str, scenario_path: str, n_frames: int) -> int:
    """
    Time the detections-to-tracks path over `n_frames` frames (no file output).

    Returns:
        Process exit status
    """
    try:
        app = load_app_config()
    except ConfigError as e:
        return _report_bad_input(e)
    setup_logging(app.log_level)
    try:
        config, scenario = _load_inputs(config_path, scenario_path)
        if n_frames < 1:
            raise ConfigError(f"--frames: must be >= 1, got {n_frames}")
    except (ConfigError, FileNotFoundError) as e:
        return _report_bad_input(e)

    try:
        output = simulate_sequence(config, scenario, n_frames, threads=app.threads)
    except Exception as e:
        logger.critical(f"Benchmark failed: {e}", exc_info=True)
        flush_logging()
        return EXIT_RUNTIME_ERROR

    summary = bench_summary(output.timing)
    timing = output.timing
    print(f"Benchmark '{scenario.name}': {len(timing)} frames, "
          f"{timing['n_points'].mean():.0f} points/frame, {timing['n_agents'].mean():.1f} agents/frame")
    print(summary.to_string(index=False, float_format=lambda v: f"{v:.2f}"))
    logger.info(f"End-to-end p95 {summary.loc[summary['stage'] == 'total', 'p95_ms'].iloc[0]:.2f} ms/frame")
    flush_logging()
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fusiontrack", description="Camera + LiDAR fusion tracking pipeline")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="Simulate, track and evaluate a scenario")
    p_run.add_argument("--config", required=True)
    p_run.add_argument("--scenario", required=True)
    p_run.add_argument("--out", default=None, help="Output directory (default: FUSIONTRACK_OUT_DIR or ./out)")
    p_run.add_argument("--frames", type=int, default=None)
    p_run.add_argument("--svg-every", type=int, default=None)
    p_run.add_argument("--seed", type=int, default=None)
    p_run.add_argument("--report", action="store_true", default=None, help="Write the plotly HTML error report")

    p_bench = sub.add_parser("bench", help="Report per-stage latency percentiles")
    p_bench.add_argument("--config", required=True)
    p_bench.add_argument("--scenario", required=True)
    p_bench.add_argument("--frames", type=int, default=100)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "run":
        return run(args.config, args.scenario, args.out, frames=args.frames, svg_every=args.svg_every,
                   seed=args.seed, report=args.report)
    return bench(args.config, args.scenario, args.frames)


if __name__ == "__main__":
    sys.exit(main())
