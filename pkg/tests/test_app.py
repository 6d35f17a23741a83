"""
Tests for loading run artifacts into the dashboard.
"""
import pytest

from app import load_run
from run_pipeline import run


def test_load_run(tmp_path, small_config_path, small_scenario_path):
    out = str(tmp_path / "out")
    assert run(small_config_path, small_scenario_path, out, frames=3) == 0
    artifacts = load_run(out)
    assert artifacts.n_frames == 3
    assert len(artifacts.truth_log) == 3
    assert list(artifacts.timing["frame"]) == [0, 1, 2]
    assert artifacts.metrics.loc[0, "sequence"] == "tiny"
    assert [p.endswith(".svg") for p in artifacts.snapshots] == [True, True]


def test_empty_directory(tmp_path):
    artifacts = load_run(str(tmp_path))
    assert artifacts.n_frames == 0
    assert artifacts.metrics.empty and artifacts.snapshots == []


def test_missing_directory(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_run(str(tmp_path / "missing"))
