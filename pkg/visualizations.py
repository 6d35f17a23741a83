"""
Module for drawing tracker results: bird's-eye-view SVG snapshots and plotly error charts.
"""
import math
from typing import Any, Dict, List, Optional, Sequence
from xml.sax.saxutils import escape

import numpy as np
import pandas as pd
import plotly.express as px
import plotly.graph_objects as go
from plotly.subplots import make_subplots

from rig_geometry import TWO_PI, SensorRig, camera_interval, camera_overlap_sectors
from utils import rotation_2d, wrap_angle

CANVAS_PX = 800
DEFAULT_RANGE_M = 50.0
CLASS_COLORS = {"Car": "#d62728", "Pedestrian": "#2ca02c", "Cyclist": "#ff7f0e"}
FOV_FILL = "#9ecae1"
OVERLAP_FILL = "#08519c"
TRUTH_STROKE = "#444444"


def _fmt(value: float) -> str:
    text = f"{value:.2f}"
    return "0.00" if text == "-0.00" else text


class _Canvas:
    """Vehicle frame to SVG: x forward is up, y left is left."""

    def __init__(self, range_m: float, size_px: int):
        self.size = size_px
        self.center = size_px / 2.0
        self.scale = (size_px / 2.0) / range_m

    def point(self, x: float, y: float) -> str:
        return f"{_fmt(self.center - y * self.scale)},{_fmt(self.center - x * self.scale)}"

    def wedge(self, origin: np.ndarray, start: float, width: float, radius_m: float, css_class: str,
              fill: str, opacity: float, attrs: str) -> str:
        if width >= TWO_PI - 1e-9:
            cx, cy = self.point(origin[0], origin[1]).split(",")
            return (f'<circle class="{css_class}" cx="{cx}" cy="{cy}" r="{_fmt(radius_m * self.scale)}" '
                    f'fill="{fill}" fill-opacity="{opacity}" {attrs}/>')
        a0, a1 = start, start + width
        p0 = origin + radius_m * np.array([math.cos(a0), math.sin(a0)])
        p1 = origin + radius_m * np.array([math.cos(a1), math.sin(a1)])
        large = 1 if width > math.pi else 0
        r = _fmt(radius_m * self.scale)
        # counter-clockwise azimuth is counter-clockwise on screen (sweep-flag 0)
        path = (f"M {self.point(origin[0], origin[1])} L {self.point(p0[0], p0[1])} "
                f"A {r} {r} 0 {large} 0 {self.point(p1[0], p1[1])} Z")
        return f'<path class="{css_class}" d="{path}" fill="{fill}" fill-opacity="{opacity}" {attrs}/>'

    def polygon(self, corners: np.ndarray, css_class: str, style: str, attrs: str = "") -> str:
        pts = " ".join(self.point(x, y) for x, y in corners)
        return f'<polygon class="{css_class}" points="{pts}" {style} {attrs}/>'.replace("  ", " ")


def _footprint(x: float, y: float, yaw: float, length: float, width: float) -> np.ndarray:
    half = np.array([[length, width], [-length, width], [-length, -width], [length, -width]]) / 2.0
    return half @ rotation_2d(yaw).T + np.array([x, y])


def _truth_in_vehicle_frame(truth: Dict[str, Any]) -> List[Dict[str, Any]]:
    ego = truth.get("ego") or {"x": 0.0, "y": 0.0, "yaw": 0.0}
    inv = rotation_2d(ego["yaw"]).T
    agents = []
    for agent in truth.get("agents", []):
        xy = inv @ np.array([agent["x"] - ego["x"], agent["y"] - ego["y"]])
        agents.append({**agent, "x": float(xy[0]), "y": float(xy[1]), "yaw": wrap_angle(agent["yaw"] - ego["yaw"])})
    return sorted(agents, key=lambda a: a["id"])


def emit_bev_plot(frame: int, tracks: Sequence[Dict[str, Any]], truth: Optional[Dict[str, Any]],
                  rig: SensorRig, range_m: float = DEFAULT_RANGE_M, size_px: int = CANVAS_PX) -> str:
    """
    Render one frame as a top-down SVG document in the vehicle frame.

    Args:
        frame: Frame index shown in the title
        tracks: Track records (vehicle frame) as written to tracks.jsonl
        truth: Ground-truth record (global frame, with its ego pose) or None
        rig: Sensor rig whose camera wedges are drawn
        range_m: Distance from the ego to the canvas edge
        size_px: Canvas width and height

    Returns:
        SVG document text; identical input gives identical output
    """
    canvas = _Canvas(range_m, size_px)
    origin = rig.ego_extrinsic.translation[:2].astype(float)
    yaw_offset = rig.ego_extrinsic.yaw
    wedge_radius = range_m * 0.9

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{size_px}" height="{size_px}" '
        f'viewBox="0 0 {size_px} {size_px}">',
        f'<title>frame {frame}</title>',
        f'<rect x="0" y="0" width="{size_px}" height="{size_px}" fill="#ffffff"/>',
        '<g id="fov">',
    ]
    for i, cam in enumerate(rig.cameras):
        interval = camera_interval(cam)
        attrs = (f'data-camera="{i}" data-start-deg="{math.degrees(interval.start):.4f}" '
                 f'data-width-deg="{math.degrees(interval.width):.4f}"')
        parts.append(canvas.wedge(origin, interval.start + yaw_offset, interval.width, wedge_radius,
                                  "fov", FOV_FILL, 0.25, attrs))
    parts.append('</g>')

    parts.append('<g id="overlap">')
    for sector in camera_overlap_sectors(rig):
        attrs = (f'data-start-deg="{math.degrees(sector.start):.4f}" '
                 f'data-width-deg="{math.degrees(sector.width):.4f}"')
        parts.append(canvas.wedge(origin, sector.start + yaw_offset, sector.width, wedge_radius,
                                  "overlap", OVERLAP_FILL, 0.35, attrs))
    parts.append('</g>')

    if truth is not None:
        parts.append('<g id="truth">')
        for agent in _truth_in_vehicle_frame(truth):
            corners = _footprint(agent["x"], agent["y"], agent["yaw"], agent["size"][0], agent["size"][1])
            parts.append(canvas.polygon(corners, "truth",
                                        f'fill="none" stroke="{TRUTH_STROKE}" stroke-dasharray="4 3"',
                                        f'data-agent="{agent["id"]}"'))
        parts.append('</g>')

    parts.append('<g id="tracks">')
    for rec in sorted(tracks, key=lambda r: r["id"]):
        color = CLASS_COLORS.get(rec["class"], "#1f77b4")
        corners = _footprint(rec["x"], rec["y"], rec["yaw"], rec["size"][0], rec["size"][1])
        parts.append(canvas.polygon(corners, "track", f'fill="{color}" fill-opacity="0.5" stroke="{color}"',
                                    f'data-track="{rec["id"]}"'))
        label_x, label_y = canvas.point(rec["x"], rec["y"]).split(",")
        parts.append(f'<text class="track-label" x="{label_x}" y="{label_y}" font-size="11" '
                     f'text-anchor="middle">{escape(str(rec["id"]))} {escape(rec["class"])}</text>')
    parts.append('</g>')

    # ego: triangle pointing forward
    ego = np.array([[2.5, 0.0], [-1.5, 1.0], [-1.5, -1.0]])
    parts.append(canvas.polygon(ego, "ego", 'fill="#000000"', 'id="ego"'))
    parts.append('</svg>')
    return "\n".join(parts) + "\n"


def error_series_figure(series: pd.DataFrame) -> go.Figure:
    """
    Create stacked line charts of distance, heading and speed errors over time.

    Args:
        series: Per-frame error table with t, agent_id, distance_m, heading_rad and speed_mps columns

    Returns:
        Plotly figure object
    """
    if series.empty:
        fig = go.Figure()
        fig.update_layout(title='No matched frames to plot')
        return fig

    fig = make_subplots(rows=3, cols=1, shared_xaxes=True, vertical_spacing=0.06,
                        subplot_titles=("Distance error (m)", "Heading error (rad)", "Speed error (m/s)"))
    palette = px.colors.qualitative.Safe
    for i, (agent_id, group) in enumerate(series.sort_values("t").groupby("agent_id", sort=True)):
        color = palette[i % len(palette)]
        for row, column in enumerate(("distance_m", "heading_rad", "speed_mps"), start=1):
            fig.add_trace(
                go.Scatter(x=group["t"], y=group[column], mode="lines", name=f"agent {agent_id}",
                           legendgroup=str(agent_id), showlegend=(row == 1), line=dict(color=color)),
                row=row, col=1,
            )
    fig.update_xaxes(title_text="Time (s)", row=3, col=1)
    fig.update_layout(title="Tracking errors per frame", height=800,
                      legend=dict(orientation="h", yanchor="bottom", y=-0.15, xanchor="center", x=0.5))
    return fig


def timing_percentiles_chart(summary: pd.DataFrame) -> go.Figure:
    """
    Create a grouped bar chart of per-stage latency percentiles.

    Args:
        summary: Table with 'stage', 'p50_ms' and 'p95_ms' columns

    Returns:
        Plotly figure object
    """
    if summary.empty:
        fig = go.Figure()
        fig.update_layout(title='No timing data available')
        return fig

    long = summary.melt(id_vars="stage", value_vars=["p50_ms", "p95_ms"], var_name="percentile", value_name="ms")
    fig = px.bar(long, x="stage", y="ms", color="percentile", barmode="group",
                 title="Stage latency", color_discrete_sequence=px.colors.qualitative.Safe)
    fig.update_layout(yaxis_title="Milliseconds", xaxis_title="Stage")
    return fig
