"""
Tests for pipeline configuration parsing.
"""
import os

import pytest

from box_estimation import AmodalMode
from config import AppConfig, ConfigError, load_app_config, load_pipeline_config, pipeline_config_from_dict
from fusion_association import ClassLabel
from motion_models import MotionKind

from conftest import REPO_ROOT


@pytest.mark.parametrize("name", ["default.toml", "bench.toml"])
def test_bundled_configs_load(name):
    config = load_pipeline_config(os.path.join(REPO_ROOT, "configs", name))
    assert len(config.rig.cameras) == 5
    assert config.estimator.amodal_mode is AmodalMode.ANCHORED


def test_defaults():
    config = pipeline_config_from_dict({})
    assert config.association.mode == "mask"
    assert config.association_far == config.rig.lidar.max_range
    assert config.nms.iou_threshold == 0.3
    assert config.tracker.motion_model(ClassLabel.PEDESTRIAN).kind is MotionKind.CV
    assert config.tracker.motion_model(ClassLabel.CAR).alpha == 0.5


def test_bench_lidar_density():
    config = load_pipeline_config(os.path.join(REPO_ROOT, "configs", "bench.toml"))
    assert config.rig.lidar.n_layers * config.rig.lidar.n_azimuth_steps >= 50_000


@pytest.mark.parametrize("raw,key", [
    ({"sensors": {}}, "sensors"),
    ({"rig": {"n_cameras": "five"}}, "rig.n_cameras"),
    ({"lidar": {"max_range_m": -1.0}}, "lidar.max_range_m"),
    ({"nms": {"iou_threshold": 1.5}}, "nms.iou_threshold"),
    ({"association": {"mode": "voxel"}}, "association.mode"),
    ({"association": {"near": 5.0, "far": 2.0}}, "association.far"),
    ({"priors": {"Truck": {"mean": [8, 2.5, 3]}}}, "priors.Truck"),
    ({"tracker": {"confirm_hits": 6, "confirm_window": 5}}, "tracker.confirm_hits"),
    ({"tracker": {"models": {"Car": "CTRA"}}}, "tracker.models.Car"),
    ({"estimator": {"amodal_mode": "grow"}}, "estimator.amodal_mode"),
])
def test_errors_name_the_key(raw, key):
    with pytest.raises(ConfigError, match=key.replace(".", r"\.")):
        pipeline_config_from_dict(raw)


def test_rig_must_cover_the_circle():
    with pytest.raises(ConfigError, match="cover|overlap"):
        pipeline_config_from_dict({"rig": {"n_cameras": 3, "hfov_deg": 90.0}})


def test_custom_priors():
    config = pipeline_config_from_dict({"priors": {"Car": {"mean": [5.0, 2.0, 1.5]}}})
    prior = config.priors[ClassLabel.CAR]
    assert prior.mean_size == (5.0, 2.0, 1.5)
    assert prior.min_size == pytest.approx((3.0, 1.2, 0.9))


class TestAppConfig:
    def test_environment_defaults(self):
        assert load_app_config({}) == AppConfig()

    def test_reads_the_environment(self, monkeypatch):
        monkeypatch.setenv("LOG_LEVEL", "debug")
        monkeypatch.setenv("FUSIONTRACK_THREADS", "3")
        monkeypatch.setenv("FUSIONTRACK_OUT_DIR", "results")
        app = load_app_config()
        assert (app.log_level, app.threads, app.out_dir) == ("DEBUG", 3, "results")

    @pytest.mark.parametrize("env,key", [
        ({"FUSIONTRACK_THREADS": "four"}, "FUSIONTRACK_THREADS"),
        ({"FUSIONTRACK_THREADS": "-1"}, "FUSIONTRACK_THREADS"),
        ({"LOG_LEVEL": "LOUD"}, "LOG_LEVEL"),
    ])
    def test_errors_name_the_variable(self, env, key):
        with pytest.raises(ConfigError, match=key):
            load_app_config(env)
