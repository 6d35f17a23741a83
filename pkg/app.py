"""
Offline results dashboard for pipeline output directories.

    streamlit run app.py -- --out out/roundabout
"""
import os
import sys
import glob
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional

import pandas as pd
import streamlit as st

from config import AppConfig, ConfigError, load_app_config, load_pipeline_config
from run_pipeline import (METRICS_FILENAME, SERIES_FILENAME, SVG_DIRNAME, TIMING_FILENAME, TRACKS_FILENAME,
                          TRUTH_FILENAME, bench_summary)
from utils import read_jsonl
from visualizations import emit_bev_plot, error_series_figure, timing_percentiles_chart

logger = logging.getLogger(__name__)

DEFAULT_CONFIG_PATH = os.path.join("configs", "default.toml")


@dataclass
class RunArtifacts:
    """Everything a `run` wrote into one output directory."""
    out_dir: str
    metrics: pd.DataFrame = field(default_factory=pd.DataFrame)
    series: pd.DataFrame = field(default_factory=pd.DataFrame)
    timing: pd.DataFrame = field(default_factory=pd.DataFrame)
    track_log: List[Dict] = field(default_factory=list)
    truth_log: List[Dict] = field(default_factory=list)
    snapshots: List[str] = field(default_factory=list)

    @property
    def n_frames(self) -> int:
        return len(self.track_log)


def _read_csv(path: str) -> pd.DataFrame:
    if not os.path.exists(path):
        return pd.DataFrame()
    try:
        return pd.read_csv(path)
    except pd.errors.EmptyDataError:
        return pd.DataFrame()


def load_run(out_dir: str) -> RunArtifacts:
    """
    Load the artifacts of one output directory; missing files give empty tables.

    Raises:
        FileNotFoundError: `out_dir` does not exist
    """
    if not os.path.isdir(out_dir):
        raise FileNotFoundError(f"no such output directory: {out_dir}")
    artifacts = RunArtifacts(out_dir)
    artifacts.metrics = _read_csv(os.path.join(out_dir, METRICS_FILENAME))
    artifacts.series = _read_csv(os.path.join(out_dir, SERIES_FILENAME))
    artifacts.timing = _read_csv(os.path.join(out_dir, TIMING_FILENAME))
    for name, attr in ((TRACKS_FILENAME, "track_log"), (TRUTH_FILENAME, "truth_log")):
        path = os.path.join(out_dir, name)
        if os.path.exists(path):
            setattr(artifacts, attr, list(read_jsonl(path)))
    artifacts.snapshots = sorted(glob.glob(os.path.join(out_dir, SVG_DIRNAME, "*.svg")))
    logger.info(f"Loaded {artifacts.n_frames} frames from {out_dir}")
    return artifacts


def _default_out_dir(argv: List[str]) -> str:
    if "--out" in argv:
        i = argv.index("--out")
        if i + 1 < len(argv):
            return argv[i + 1]
    try:
        return load_app_config().out_dir
    except ConfigError as e:
        logger.warning(f"Ignoring environment settings: {e}")
        return AppConfig().out_dir


def display_metrics(artifacts: RunArtifacts) -> None:
    st.subheader("Sequence metrics")
    if artifacts.metrics.empty:
        st.info("No metrics.csv in this directory.")
        return
    row = artifacts.metrics.iloc[0]
    col1, col2, col3, col4 = st.columns(4)
    col1.metric("Mean distance error", f"{row['mean_distance_m']:.3f} m")
    col2.metric("Mean heading error", f"{row['mean_heading_rad']:.4f} rad")
    col3.metric("Mean speed error", f"{row['mean_speed_mps']:.3f} m/s")
    col4.metric("Matched fraction", f"{row['matched_fraction']:.1%}")
    st.dataframe(artifacts.metrics, use_container_width=True)


def display_bev(artifacts: RunArtifacts, config_path: str) -> None:
    st.subheader("Bird's-eye view")
    if not artifacts.track_log:
        st.info("No tracks.jsonl in this directory.")
        return
    try:
        rig = load_pipeline_config(config_path).rig
    except (ConfigError, FileNotFoundError) as e:
        st.error(f"Could not load rig from {config_path}: {e}")
        return
    frame = st.slider("Frame", 0, artifacts.n_frames - 1, artifacts.n_frames - 1)
    truth = artifacts.truth_log[frame] if frame < len(artifacts.truth_log) else None
    svg = emit_bev_plot(frame, artifacts.track_log[frame]["tracks"], truth, rig)
    st.markdown(svg, unsafe_allow_html=True)
    if artifacts.snapshots:
        st.caption(f"{len(artifacts.snapshots)} saved snapshots, latest: {os.path.basename(artifacts.snapshots[-1])}")


def main() -> None:
    st.set_page_config(page_title="Fusion Tracking Results", layout="wide", initial_sidebar_state="expanded")
    st.title("Fusion Tracking Results")

    with st.sidebar:
        out_dir = st.text_input("Output directory", value=_default_out_dir(sys.argv))
        config_path = st.text_input("Pipeline config", value=DEFAULT_CONFIG_PATH)

    try:
        artifacts = load_run(out_dir)
    except FileNotFoundError as e:
        st.error(str(e))
        return

    display_metrics(artifacts)

    tab_errors, tab_timing, tab_bev = st.tabs(["Errors", "Timing", "BEV"])
    with tab_errors:
        st.plotly_chart(error_series_figure(artifacts.series), use_container_width=True)
    with tab_timing:
        summary = bench_summary(artifacts.timing) if not artifacts.timing.empty else pd.DataFrame()
        st.plotly_chart(timing_percentiles_chart(summary), use_container_width=True)
        if not summary.empty:
            st.dataframe(summary, use_container_width=True)
    with tab_bev:
        display_bev(artifacts, config_path)


if __name__ == "__main__":
    main()
