"""
Tests for poses, projection, frustums and camera coverage sectors.
"""
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.spatial.transform import Rotation

from rig_geometry import (TWO_PI, AzimuthInterval, CameraModel, InvalidDetectionError, LidarModel, PointCloud,
                          Pose, build_frustum, camera_from_azimuth, camera_interval, camera_overlap_sectors,
                          coverage_sectors, default_rig, project_point, project_points, transform_cloud)


def _random_pose(rng):
    rotation = Rotation.random(random_state=rng).as_matrix()
    return Pose(rotation, rng.uniform(-50.0, 50.0, 3))


class TestPose:
    def test_rejects_non_rotation(self):
        with pytest.raises(ValueError):
            Pose(np.diag([1.0, 1.0, -1.0]), np.zeros(3))
        with pytest.raises(ValueError):
            Pose(np.eye(3) * 1.01, np.zeros(3))
        with pytest.raises(ValueError):
            Pose(np.eye(3), np.array([0.0, np.nan, 0.0]))

    def test_quaternion_yaw(self):
        yaw = 0.7
        pose = Pose.from_quaternion((math.cos(yaw / 2), 0.0, 0.0, math.sin(yaw / 2)), (1.0, 2.0, 3.0))
        assert pose.yaw == pytest.approx(yaw, abs=1e-12)
        np.testing.assert_allclose(pose.rotation, Pose.from_yaw(yaw).rotation, atol=1e-12)

    def test_zero_quaternion_rejected(self):
        with pytest.raises(ValueError):
            Pose.from_quaternion((0.0, 0.0, 0.0, 0.0), (0.0, 0.0, 0.0))

    def test_group_laws_over_random_compositions(self):
        rng = np.random.default_rng(7)
        point = np.array([3.0, -2.0, 1.0])
        for _ in range(10_000):
            a, b, c = _random_pose(rng), _random_pose(rng), _random_pose(rng)
            left = a.compose(b).compose(c).apply(point)
            right = a.compose(b.compose(c)).apply(point)
            assert np.max(np.abs(left - right)) <= 1e-9
            identity = a.inverse().compose(a)
            assert np.max(np.abs(identity.rotation - np.eye(3))) <= 1e-9
            assert np.max(np.abs(identity.translation)) <= 1e-9


class TestProjection:
    def setup_method(self):
        self.cam = CameraModel(fx=500.0, fy=500.0, cx=320.0, cy=240.0, width=640, height=480)

    def test_principal_point(self):
        assert project_point((0.0, 0.0, 5.0), self.cam) == pytest.approx((320.0, 240.0, 5.0))

    def test_hand_computed_pixel(self):
        u, v, z = project_point((1.0, 0.5, 10.0), self.cam)
        assert (u, v, z) == pytest.approx((370.0, 265.0, 10.0), abs=1e-12)

    def test_behind_camera_is_absent(self):
        assert project_point((0.0, 0.0, -1.0), self.cam) is None
        assert project_point((0.0, 0.0, 0.0), self.cam) is None

    def test_outside_image_is_absent(self):
        assert project_point((10.0, 0.0, 1.0), self.cam) is None

    def test_level_camera_axes(self):
        # LiDAR x forward, y left: a point to the left lands left of the principal point
        cam = camera_from_azimuth(0.0, 90.0, 640, 480)
        u, v, z = project_point((10.0, 1.0, 0.0), cam)
        assert z == pytest.approx(10.0)
        assert u == pytest.approx(320.0 - cam.fx / 10.0)
        assert v == pytest.approx(240.0)

    @given(seed=st.integers(min_value=0, max_value=2**32 - 1))
    @settings(max_examples=200, deadline=None)
    def test_scale_invariance_along_rays(self, seed):
        rng = np.random.default_rng(seed)
        cam = default_rig().cameras[int(rng.integers(0, 5))]
        p_cam = np.array([rng.uniform(-5, 5), rng.uniform(-4, 4), rng.uniform(1.0, 20.0)])
        p = cam.extrinsic.inverse().apply(p_cam)
        uv1, depth1, _ = project_points(p.reshape(1, 3), cam)
        uv2, depth2, _ = project_points((2.0 * p - cam.optical_center).reshape(1, 3), cam)
        np.testing.assert_allclose(uv1, uv2, atol=1e-6)
        assert depth2[0] == pytest.approx(2.0 * depth1[0])


class TestFrustum:
    def setup_method(self):
        self.rig = default_rig()
        self.cam = self.rig.cameras[1]

    def test_degenerate_rectangle(self):
        with pytest.raises(InvalidDetectionError):
            build_frustum((10.0, 10.0, 10.0, 50.0), self.cam)
        with pytest.raises(InvalidDetectionError):
            build_frustum((10.0, 10.0, 700.0, 50.0), self.cam)

    def test_invalid_depth_range(self):
        with pytest.raises(ValueError):
            build_frustum((0.0, 0.0, 10.0, 10.0), self.cam, near=5.0, far=1.0)

    def test_full_image_contains_valid_projections(self):
        rng = np.random.default_rng(3)
        points = rng.uniform(-60.0, 60.0, (2000, 3))
        frustum = build_frustum((0.0, 0.0, self.cam.width, self.cam.height), self.cam, near=0.1,
                                far=self.rig.lidar.max_range)
        _, depth, valid = project_points(points, self.cam)
        expected = valid & (depth >= 0.1)
        assert expected.sum() > 50
        assert np.all(frustum.contains(points)[expected])

    def test_one_pixel_outside_is_excluded(self):
        box = (100.0, 100.0, 200.0, 180.0)
        frustum = build_frustum(box, self.cam)
        inv = self.cam.extrinsic.inverse()
        depth = 12.0
        inside = inv.apply(np.array([(150.0 - self.cam.cx) * depth / self.cam.fx,
                                     (140.0 - self.cam.cy) * depth / self.cam.fy, depth]))
        outside = inv.apply(np.array([(201.0 - self.cam.cx) * depth / self.cam.fx,
                                      (140.0 - self.cam.cy) * depth / self.cam.fy, depth]))
        assert frustum.contains(inside)[0]
        assert not frustum.contains(outside)[0]

    def test_side_planes_pass_through_optical_center(self):
        frustum = build_frustum((50.0, 60.0, 300.0, 400.0), self.cam)
        center = self.cam.optical_center
        side = frustum.normals[:4] @ center - frustum.offsets[:4]
        np.testing.assert_allclose(side, 0.0, atol=1e-9)

    @given(seed=st.integers(min_value=0, max_value=2**32 - 1))
    @settings(max_examples=50, deadline=None)
    def test_membership_equals_projection_oracle(self, seed):
        rng = np.random.default_rng(seed)
        cam = self.rig.cameras[int(rng.integers(0, 5))]
        x0, x1 = np.sort(rng.uniform(0.0, cam.width, 2))
        y0, y1 = np.sort(rng.uniform(0.0, cam.height, 2))
        near, far = 0.5, float(rng.uniform(20.0, 200.0))
        frustum = build_frustum((x0, y0, x1, y1), cam, near=near, far=far)

        z = rng.uniform(-5.0, 220.0, 1000)
        p_cam = np.stack([z * rng.uniform(-1.2, 1.2, 1000), z * rng.uniform(-1.0, 1.0, 1000), z], axis=1)
        points = cam.extrinsic.inverse().apply(p_cam)
        uv, depth, _ = project_points(points, cam)
        oracle = ((depth > 0) & (uv[:, 0] >= x0) & (uv[:, 0] <= x1) & (uv[:, 1] >= y0) & (uv[:, 1] <= y1)
                  & (depth >= near) & (depth <= far))

        margin = np.min(np.abs(np.stack([uv[:, 0] - x0, uv[:, 0] - x1, uv[:, 1] - y0, uv[:, 1] - y1], axis=1)),
                        axis=1)
        clear = (margin > 1e-6) & (np.abs(depth - near) > 1e-9) & (np.abs(depth - far) > 1e-9)
        np.testing.assert_array_equal(frustum.contains(points)[clear], oracle[clear])


class TestTransformCloud:
    def test_identity_is_bitwise(self):
        points = np.random.default_rng(0).normal(size=(50, 3))
        out = transform_cloud(PointCloud(points, timestamp=1.5), Pose.identity())
        assert np.array_equal(out.points, points)
        assert out.timestamp == 1.5

    def test_translation(self):
        out = transform_cloud(PointCloud(np.zeros((1, 3))), Pose(np.eye(3), np.array([1.0, 0.0, 0.0])))
        np.testing.assert_array_equal(out.points, [[1.0, 0.0, 0.0]])

    def test_round_trip(self):
        rng = np.random.default_rng(1)
        pose = _random_pose(rng)
        cloud = PointCloud(rng.uniform(-80, 80, (100, 3)))
        back = transform_cloud(transform_cloud(cloud, pose), pose.inverse())
        np.testing.assert_allclose(back.points, cloud.points, atol=1e-9)

    def test_non_finite_points_rejected(self):
        with pytest.raises(ValueError):
            PointCloud(np.array([[0.0, np.inf, 0.0]]))


class TestCoverage:
    def test_default_rig_overlap_sectors(self):
        sectors = camera_overlap_sectors(default_rig())
        assert len(sectors) == 5
        for k, sector in enumerate(sectors):
            assert math.degrees(sector.width) == pytest.approx(13.0, abs=1e-9)
            assert math.degrees(sector.start) == pytest.approx(29.5 + 72.0 * k, abs=1e-9)

    def test_disjoint_cameras_have_no_overlap(self):
        intervals = [AzimuthInterval(0.0, math.radians(60.0)), AzimuthInterval(math.pi, math.radians(60.0))]
        assert coverage_sectors(intervals) == []

    def test_full_circle_plus_one_camera(self):
        intervals = [AzimuthInterval(0.0, TWO_PI), AzimuthInterval(math.radians(10.0), math.radians(85.0))]
        sectors = coverage_sectors(intervals)
        assert len(sectors) == 1
        assert sectors[0].start == pytest.approx(math.radians(10.0))
        assert sectors[0].width == pytest.approx(math.radians(85.0))

    def test_sector_crossing_zero_is_joined(self):
        intervals = [AzimuthInterval(math.radians(340.0), math.radians(40.0)),
                     AzimuthInterval(math.radians(350.0), math.radians(30.0))]
        sectors = coverage_sectors(intervals)
        assert len(sectors) == 1
        assert math.degrees(sectors[0].start) == pytest.approx(350.0)
        assert math.degrees(sectors[0].width) == pytest.approx(30.0)

    def test_camera_interval_is_centered_on_axis(self):
        cam = default_rig().cameras[0]
        interval = camera_interval(cam)
        assert math.degrees(interval.start) == pytest.approx(360.0 - 42.5)
        assert math.degrees(interval.width) == pytest.approx(85.0)
        assert interval.contains(0.0)

    def test_validate(self):
        assert default_rig().validate() == []
        problems = default_rig(n_cameras=4).validate()
        assert any("360" in p for p in problems)
        assert any("do not overlap" in p for p in problems)


class TestModels:
    def test_binning_halves_intrinsics(self):
        cam = camera_from_azimuth(0.0, 85.0, 640, 480, roi_rows=(100, 301))
        binned = cam.binned(2)
        assert (binned.width, binned.height) == (320, 240)
        assert binned.fx == pytest.approx(cam.fx / 2)
        assert binned.roi_rows == (50, 151)
        assert binned.hfov == pytest.approx(cam.hfov, abs=0.5)

    def test_hfov_must_match_intrinsics(self):
        with pytest.raises(ValueError):
            CameraModel(fx=500.0, fy=500.0, cx=320.0, cy=240.0, width=640, height=480, hfov=90.0)

    def test_lidar_ray_count(self):
        lidar = LidarModel.uniform(16, -15.0, 15.0, horizontal_resolution=1.0)
        directions = lidar.ray_directions
        assert directions.shape == (16 * 360, 3)
        np.testing.assert_allclose(np.linalg.norm(directions, axis=1), 1.0)

    def test_lidar_validation(self):
        with pytest.raises(ValueError):
            LidarModel(n_layers=2, vertical_angles=(5.0, 1.0))
        with pytest.raises(ValueError):
            LidarModel.uniform(4, -10.0, 10.0, max_range=0.0)
