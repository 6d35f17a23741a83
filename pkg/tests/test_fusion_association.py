"""
Tests for mask and frustum association of LiDAR points to 2D detections.
"""
import numpy as np
import pytest
from hypothesis import assume, given, settings, strategies as st

from fusion_association import (AssociationSource, ClassLabel, Detection2D, associate, associate_frustum,
                                associate_mask, build_label_image, decode_rle, detection_from_record,
                                detection_to_record, encode_rle, frustum_membership, read_detections_jsonl,
                                write_detections_jsonl)
from rig_geometry import PixelRect, PointCloud, camera_from_azimuth, project_points
from scenario_sim import NoiseSpec, render_detections, render_lidar

from conftest import build_small_rig, make_agent, make_world


def _full_detection(box, camera_id=0, label=ClassLabel.CAR, score=0.9):
    x0, y0, x1, y1 = box
    return Detection2D(camera_id, label, score, PixelRect(x0, y0, x1, y1),
                       np.ones((y1 - y0, x1 - x0), dtype=bool))


def _wall(depth, offsets):
    """Grid of LiDAR points on the plane x = depth (camera 0 looks along +x)."""
    return np.array([[depth, y, z] for y in offsets for z in offsets], dtype=float)


class TestDetection2D:
    def test_mask_must_match_box(self):
        with pytest.raises(ValueError):
            Detection2D(0, ClassLabel.CAR, 0.5, PixelRect(0, 0, 4, 4), np.ones((3, 4), dtype=bool))

    def test_empty_mask_rejected(self):
        with pytest.raises(ValueError):
            Detection2D(0, ClassLabel.CAR, 0.5, PixelRect(0, 0, 2, 2), np.zeros((2, 2), dtype=bool))

    def test_score_range(self):
        with pytest.raises(ValueError):
            _full_detection((0, 0, 2, 2), score=1.5)

    def test_record_round_trip_keeps_mask(self):
        mask = np.zeros((3, 5), dtype=bool)
        mask[1, 1:4] = True
        det = Detection2D(2, ClassLabel.CYCLIST, 0.7, PixelRect(10, 20, 15, 23), mask)
        back = detection_from_record(detection_to_record(det))
        assert back.camera_id == 2 and back.class_label is ClassLabel.CYCLIST
        np.testing.assert_array_equal(back.mask, mask)

    def test_rle_starts_with_zero_run(self):
        assert encode_rle(np.array([[True, True, False]])) == [0, 2, 1]
        np.testing.assert_array_equal(decode_rle([0, 2, 1], (1, 3)), [[True, True, False]])
        with pytest.raises(ValueError):
            decode_rle([1, 1], (1, 3))

    def test_jsonl_file_round_trip(self, tmp_path):
        dets = [_full_detection((0, 0, 3, 2)), _full_detection((5, 5, 9, 8), camera_id=4, label=ClassLabel.PEDESTRIAN)]
        path = str(tmp_path / "dets.jsonl")
        assert write_detections_jsonl(dets, path) == 2
        back = read_detections_jsonl(path)
        assert [d.camera_id for d in back] == [0, 4]
        assert back[1].class_label is ClassLabel.PEDESTRIAN
        assert back[1].mask.shape == (3, 4) and back[1].mask.all()

    def test_record_missing_field(self):
        record = detection_to_record(_full_detection((0, 0, 2, 2)))
        del record["score"]
        with pytest.raises(ValueError, match="score"):
            detection_from_record(record)


class TestMaskAssociation:
    def setup_method(self):
        # hfov 90 deg at 640 px: f = 320, a point (10, y, z) lands at u = 320 - 32 y, v = 240 - 32 z
        self.cam = camera_from_azimuth(0.0, 90.0, 640, 480)
        self.cloud = PointCloud(_wall(10.0, [-1.0, -0.5, 0.0, 0.5, 1.0]))

    def test_empty_cloud(self):
        det = _full_detection((300, 220, 340, 260))
        assert associate_mask(PointCloud(np.empty((0, 3))), [det], self.cam) == []

    def test_points_inside_mask(self):
        det = _full_detection((300, 220, 340, 260))
        result = associate_mask(self.cloud, [det], self.cam)
        assert len(result) == 1
        assert result[0].source is AssociationSource.MASK
        assert len(result[0]) == 9
        assert np.all(np.abs(result[0].points[:, 1:]) <= 0.5)

    def test_min_points_filter(self):
        det = _full_detection((300, 220, 340, 260))
        assert associate_mask(self.cloud, [det], self.cam, min_points=10) == []

    def test_nested_masks_prefer_smaller(self):
        outer = _full_detection((280, 200, 360, 280))
        inner = _full_detection((310, 230, 330, 250), label=ClassLabel.PEDESTRIAN)
        result = associate_mask(self.cloud, [outer, inner], self.cam, min_points=1)
        by_label = {inst.detection.class_label: inst for inst in result}
        # only (10, 0, 0) projects into the inner box
        np.testing.assert_allclose(by_label[ClassLabel.PEDESTRIAN].points, [[10.0, 0.0, 0.0]])
        assert len(by_label[ClassLabel.CAR]) == 24

    def test_label_image_tie_goes_to_lower_index(self):
        a = _full_detection((0, 0, 4, 4))
        b = _full_detection((2, 2, 6, 6))
        label = build_label_image([a, b], self.cam)
        assert label[3, 3] == 0
        assert label[5, 5] == 1
        assert label[10, 10] == -1

    def test_mixed_cameras_rejected(self):
        with pytest.raises(ValueError):
            associate_mask(self.cloud, [_full_detection((0, 0, 2, 2)), _full_detection((0, 0, 2, 2), camera_id=1)],
                           self.cam)

    def test_unknown_mode(self):
        with pytest.raises(ValueError):
            associate(self.cloud, [_full_detection((0, 0, 2, 2))], self.cam, mode="voxel")


class TestFrustumAssociation:
    def setup_method(self):
        self.cam = camera_from_azimuth(0.0, 90.0, 640, 480)

    def test_whole_image_takes_every_forward_point(self):
        rng = np.random.default_rng(4)
        cloud = PointCloud(rng.uniform(-30.0, 30.0, (500, 3)))
        det = _full_detection((0, 0, 640, 480))
        result = associate_frustum(cloud, [det], self.cam, min_points=1, near=1e-6)
        _, _, valid = project_points(cloud.points, self.cam)
        assert set(result[0].indices.tolist()) >= set(np.flatnonzero(valid).tolist())

    def test_overlap_goes_to_nearest_mean_depth(self):
        near_cluster = _wall(10.0, [-0.3, -0.1, 0.1, 0.3])           # inside both boxes
        far_cluster = np.array([[20.0, 1.6, z] for z in (-0.3, -0.1, 0.1, 0.3)] * 4)  # u = 294.4: only in B
        cloud = PointCloud(np.vstack([near_cluster, far_cluster]))
        a = _full_detection((300, 220, 340, 260))
        b = _full_detection((290, 210, 350, 270), label=ClassLabel.PEDESTRIAN)
        raw = associate_frustum(cloud, [a, b], self.cam, min_points=1, exclusive=False)
        assert len(raw[1]) == 32
        result = associate_frustum(cloud, [a, b], self.cam, min_points=1)
        np.testing.assert_array_equal(result[0].indices, np.arange(16))
        np.testing.assert_array_equal(result[1].indices, np.arange(16, 32))

    @given(seed=st.integers(min_value=0, max_value=2**32 - 1))
    @settings(max_examples=100, deadline=None)
    def test_membership_equals_projection_oracle(self, seed):
        rng = np.random.default_rng(seed)
        points = rng.uniform(-40.0, 40.0, (800, 3))
        x0, y0 = int(rng.integers(0, 600)), int(rng.integers(0, 440))
        det = _full_detection((x0, y0, x0 + int(rng.integers(1, 40)), y0 + int(rng.integers(1, 40))))
        members = frustum_membership(PointCloud(points), [det], self.cam, near=0.5, far=60.0)[0]
        uv, depth, _ = project_points(points, self.cam)
        box = det.box2d
        oracle = ((depth > 0) & (depth >= 0.5) & (depth <= 60.0) & (uv[:, 0] >= box.x0) & (uv[:, 0] <= box.x1)
                  & (uv[:, 1] >= box.y0) & (uv[:, 1] <= box.y1))
        np.testing.assert_array_equal(members, np.flatnonzero(oracle))


class TestSimulatedFrames:
    """Mask association against the simulator's per-point agent labels."""

    def setup_method(self):
        self.rig = build_small_rig()

    @given(seed=st.integers(min_value=0, max_value=2**32 - 1))
    @settings(max_examples=200, deadline=None)
    def test_mask_recovers_agent_points_and_stays_inside_frustum(self, seed):
        rng = np.random.default_rng(seed)
        label = ClassLabel(rng.choice([c.value for c in ClassLabel]))
        size = {ClassLabel.CAR: (4.0, 1.8, 1.6), ClassLabel.PEDESTRIAN: (0.7, 0.7, 1.75),
                ClassLabel.CYCLIST: (1.8, 0.7, 1.7)}[label]
        distance, azimuth = rng.uniform(6.0, 25.0), rng.uniform(-np.pi, np.pi)
        agent = make_agent(1, distance * np.cos(azimuth), distance * np.sin(azimuth),
                           yaw=rng.uniform(-np.pi, np.pi), class_label=label, size=size)
        world = make_world(agent)
        cloud, labels = render_lidar(world, self.rig, NoiseSpec.zero())
        agent_points = set(np.flatnonzero(labels == 1).tolist())
        assume(len(agent_points) >= 20)
        detections, _ = render_detections(world, self.rig, NoiseSpec.zero())

        recovered = set()
        for cam_id, cam in enumerate(self.rig.cameras):
            dets = detections[cam_id]
            if not dets:
                continue
            masked = associate_mask(cloud, dets, cam, min_points=1)
            frustum = frustum_membership(cloud, dets, cam, near=1e-6)
            seen = set()
            for inst in masked:
                i = next(k for k, d in enumerate(dets) if d is inst.detection)
                idx = set(inst.indices.tolist())
                assert idx <= set(frustum[i].tolist())
                assert not idx & seen
                seen |= idx
                recovered |= idx
        assert len(recovered & agent_points) >= 0.99 * len(agent_points)
