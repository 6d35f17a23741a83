"""
Shared fixtures: a reduced rig for fast simulation and a tiny scenario file.
"""
import os

import numpy as np
import pytest

from fusion_association import ClassLabel
from rig_geometry import LidarModel, default_rig
from scenario_sim import AgentState, WorldState
from tracker import EgoPose

REPO_ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))

SMALL_CONFIG_TOML = """
[rig]
n_cameras = 5
hfov_deg = 85.0
width = 320
height = 240

[lidar]
n_layers = 16
vertical_min_deg = -25.0
vertical_max_deg = 15.0
horizontal_resolution_deg = 0.5
max_range_m = 100.0

[estimator]
amodal_mode = "anchored"

[output]
svg_every = 2
"""

SMALL_SCENARIO_TOML = """
name = "tiny"
seed = 3
duration = 0.5
rate = 10.0

[noise]
lidar_range_sigma = 0.02
detection_dropout = 0.0

[[agent]]
id = 1
class = "Car"
size = [4.0, 1.8, 1.5]
motion = "constant-velocity"
start = [12.0, 3.0]
heading_deg = 0.0
speed = 4.0
primary = true

[[agent]]
id = 2
class = "Pedestrian"
size = [0.6, 0.6, 1.75]
motion = "constant-velocity"
start = [-8.0, -6.0]
heading_deg = 90.0
speed = 1.0
"""


def build_small_rig():
    """Five 320x240 cameras around a coarse 16-layer LiDAR."""
    lidar = LidarModel.uniform(16, -25.0, 15.0, horizontal_resolution=0.5, max_range=100.0)
    return default_rig(width=320, height=240, lidar=lidar)


@pytest.fixture
def small_rig():
    return build_small_rig()


@pytest.fixture
def small_config_path(tmp_path):
    path = tmp_path / "small.toml"
    path.write_text(SMALL_CONFIG_TOML)
    return str(path)


@pytest.fixture
def small_scenario_path(tmp_path):
    path = tmp_path / "tiny.toml"
    path.write_text(SMALL_SCENARIO_TOML)
    return str(path)


def make_world(*agents, ego=(0.0, 0.0, 0.0), t=0.0, frame=0):
    """World with the ego at `ego` = (x, y, heading) and the given AgentState objects."""
    return WorldState(t=t, frame=frame, ego=EgoPose((ego[0], ego[1]), ego[2], t), agents=tuple(agents))


def make_agent(agent_id, x, y, yaw=0.0, class_label=ClassLabel.CAR, size=(4.0, 1.8, 1.6), speed=0.0):
    return AgentState(agent_id, ClassLabel(class_label), (float(x), float(y)), float(yaw), speed, 0.0,
                      tuple(size))


def random_lower_factor(rng, n, scale=1.0):
    """Random lower-triangular factor with a well conditioned, positive diagonal."""
    factor = np.tril(rng.normal(0.0, 0.1 * scale, (n, n)), k=-1)
    factor[np.diag_indices(n)] = rng.uniform(0.2, 1.0, n) * scale
    return factor
