"""
Tests for instance segmentation, centering and amodal box fitting.
"""
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from shapely.geometry import MultiPoint

from box_estimation import (DEFAULT_PRIORS, AmodalMode, Box3D, EmptyInstanceError, GeometricBoxEstimator, SizePrior,
                            box_corners_bev, estimate, estimate_center, fit_amodal_box, footprint_rectangle,
                            min_area_rectangle, segment_instance, transform_box)
from fusion_association import AssociationSource, ClassLabel, Detection2D, InstancePoints
from rig_geometry import PixelRect, Pose, default_rig
from scenario_sim import NoiseSpec, render_lidar

from conftest import make_agent, make_world

WIDE_PRIOR = SizePrior(ClassLabel.CAR, (4.0, 2.0, 1.5), (1e-6, 1e-6, 1e-6), (1e3, 1e3, 1e3))


def _rectangle_perimeter(length, width, heights, step=0.25):
    xs = np.arange(-length / 2, length / 2 + 1e-9, step)
    ys = np.arange(-width / 2, width / 2 + 1e-9, step)
    ring = ([(x, width / 2) for x in xs] + [(x, -width / 2) for x in xs]
            + [(length / 2, y) for y in ys] + [(-length / 2, y) for y in ys])
    return np.array([(x, y, z) for x, y in ring for z in heights])


def _l_outline(gap=0.15, heights=(0.3, 0.9, 1.4)):
    """Side (y = 0) and rear (x = 0) faces of a 4 x 1.8 box; the corner itself is not sampled."""
    side = [(x, 0.0) for x in np.linspace(gap, 4.0, 39)]
    rear = [(0.0, y) for y in np.linspace(gap, 1.8, 17)]
    return np.array([(x, y, z) for x, y in side + rear for z in heights])


def _instance(points, label=ClassLabel.CAR, score=0.8, camera_id=2):
    det = Detection2D(camera_id, label, score, PixelRect(0, 0, 1, 1), np.ones((1, 1), dtype=bool))
    return InstancePoints(det, np.asarray(points, dtype=float), AssociationSource.MASK)


def _rotation(theta):
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def _box_contains(box, points, tol=1e-6):
    local = (points - box.center) @ _rotation(box.yaw)
    half = np.asarray(box.size) / 2.0 + tol
    return bool(np.all(np.abs(local) <= half))


class TestSegmentation:
    def test_ground_points_removed(self):
        agent = np.random.default_rng(0).uniform([4, -1, 0.3], [8, 1, 1.5], (60, 3))
        ground = np.column_stack([np.random.default_rng(1).uniform(0, 10, (200, 2)), np.zeros(200)])
        kept = segment_instance(np.vstack([agent, ground]), ground_z=0.0)
        assert kept.shape[0] == 60
        assert np.all(kept[:, 2] > 0.15)

    def test_tight_cluster_is_identity(self):
        pts = np.random.default_rng(2).normal([5.0, 0.0, 1.0], 0.1, (30, 3))
        kept = segment_instance(pts, ground_z=-10.0)
        np.testing.assert_array_equal(np.sort(kept, axis=0), np.sort(pts, axis=0))

    def test_largest_cluster_wins(self):
        rng = np.random.default_rng(3)
        big = rng.normal([0.0, 0.0, 1.0], 0.1, (50, 3))
        small = rng.normal([5.0, 0.0, 1.0], 0.1, (10, 3))
        kept = segment_instance(np.vstack([big, small]), ground_z=-10.0)
        assert kept.shape[0] == 50
        assert np.all(kept[:, 0] < 2.5)

    def test_everything_ground(self):
        with pytest.raises(EmptyInstanceError):
            segment_instance(np.zeros((5, 3)), ground_z=0.0)


class TestCenter:
    def test_symmetric_set(self):
        pts = np.array([[1.0, 2.0, 3.0], [-1.0, -2.0, -3.0]])
        np.testing.assert_array_equal(estimate_center(pts), [0.0, 0.0, 0.0])

    def test_two_points(self):
        np.testing.assert_allclose(estimate_center(np.array([[0.0, 0, 0], [2.0, 0, 0]])), [1.0, 0.0, 0.0])

    def test_translation_equivariance(self):
        pts = np.random.default_rng(4).normal(size=(20, 3))
        t = np.array([3.0, -1.0, 0.5])
        np.testing.assert_allclose(estimate_center(pts + t), estimate_center(pts) + t, atol=1e-12)


class TestAmodalFit:
    def test_exact_rectangle(self):
        pts = _rectangle_perimeter(4.0, 2.0, [0.0, 0.75, 1.5])
        box = fit_amodal_box(pts, WIDE_PRIOR)
        np.testing.assert_allclose(box.size, (4.0, 2.0, 1.5), atol=1e-9)
        assert abs(box.yaw) < 1e-9
        np.testing.assert_allclose(box.center, (0.0, 0.0, 0.75), atol=1e-9)

    def test_rotated_rectangle(self):
        theta = math.radians(30.0)
        pts = _rectangle_perimeter(4.0, 2.0, [0.0, 1.5]) @ _rotation(theta).T + np.array([10.0, 5.0, 0.0])
        box = fit_amodal_box(pts, WIDE_PRIOR)
        np.testing.assert_allclose(box.size, (4.0, 2.0, 1.5), atol=1e-9)
        assert box.yaw == pytest.approx(theta, abs=1e-9)
        np.testing.assert_allclose(box.center[:2], (10.0, 5.0), atol=1e-9)

    def test_one_wall_falls_back_to_prior(self):
        pts = np.array([[5.0, y, z] for y, z in ((-0.5, 0.2), (0.0, 0.8), (0.5, 0.4), (0.9, 1.1))])
        box = fit_amodal_box(pts, WIDE_PRIOR, score=0.8)
        np.testing.assert_allclose(box.center, pts.mean(axis=0))
        assert box.size == WIDE_PRIOR.mean_size
        assert box.yaw == 0.0
        assert box.score == pytest.approx(0.4)

    def test_small_visible_extent_is_clamped_up(self):
        prior = SizePrior(ClassLabel.CAR, (4.0, 1.8, 1.6), (3.0, 1.5, 1.2), (5.5, 2.2, 2.0))
        pts = _rectangle_perimeter(1.0, 0.5, [0.0, 1.0])
        for mode in AmodalMode:
            box = fit_amodal_box(pts, prior, mode=mode)
            assert box.size[0] >= 3.0 - 1e-9 and box.size[1] >= 1.5 - 1e-9
            assert _box_contains(box, pts)

    def test_anchored_grows_away_from_sensor(self):
        prior = SizePrior(ClassLabel.CAR, (4.0, 1.8, 1.6), (3.0, 1.5, 1.2), (5.5, 2.2, 2.0))
        # a 0.5 m deep slab of the rear seen from the origin
        pts = np.array([[x, y, z] for x in (10.0, 10.25, 10.5) for y in np.linspace(-0.9, 0.9, 10) for z in (0.2, 1.0)])
        box = fit_amodal_box(pts, prior, mode=AmodalMode.ANCHORED)
        assert box.size[0] == pytest.approx(4.0)
        assert box.center[0] == pytest.approx(12.0, abs=1e-6)
        assert box.size[1] == pytest.approx(1.8)
        assert abs(box.yaw) < 1e-9

    def test_length_is_never_shorter_than_width(self):
        rng = np.random.default_rng(5)
        for _ in range(50):
            box = fit_amodal_box(rng.uniform(-2, 2, (15, 3)), WIDE_PRIOR)
            assert box.size[0] >= box.size[1]
            assert -math.pi / 2 < box.yaw <= math.pi / 2

    def test_min_area_rectangle_of_square(self):
        xy = np.array([[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0], [0.5, 0.5]])
        center, _, a, b = min_area_rectangle(xy)
        np.testing.assert_allclose(center, (0.5, 0.5), atol=1e-12)
        assert a * b == pytest.approx(1.0)

    def test_equal_areas_resolve_the_same_way_at_any_rotation(self):
        # acute triangle: the rectangles on all three edges have area 6
        xy = np.array([[0.0, 0.0], [3.0, 0.0], [1.2, 2.0]])
        for theta in np.linspace(-math.pi, math.pi, 13):
            rot = _rotation(theta)[:2, :2]
            _, direction, a, b = min_area_rectangle(xy @ rot.T)
            assert sorted((a, b)) == pytest.approx([2.0, 3.0])
            assert abs(direction[0] * rot[1, 0] - direction[1] * rot[0, 0]) < 1e-9

    def test_outline_beats_smaller_diagonal_rectangle(self):
        xy = _l_outline()[:, :2]
        _, _, a, b = min_area_rectangle(xy)
        assert a * b < 4.0 * 1.8 - 0.1
        center, direction, a, b = footprint_rectangle(xy)
        assert sorted((a, b)) == pytest.approx([1.8, 4.0])
        assert abs(direction[0] * direction[1]) < 1e-9
        np.testing.assert_allclose(center, (2.0, 0.9), atol=1e-9)

    def test_few_points_keep_the_minimum_area_rectangle(self):
        xy = np.array([[0.15, 0.0], [4.0, 0.0], [0.0, 1.8], [0.0, 0.15], [2.0, 0.0]])
        np.testing.assert_allclose(footprint_rectangle(xy)[1], min_area_rectangle(xy)[1])


class TestFitProperties:
    """Randomized planar point sets."""

    @given(seed=st.integers(min_value=0, max_value=2**32 - 1))
    @settings(max_examples=500, deadline=None)
    def test_containment_optimality_equivariance(self, seed):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(3, 40))
        pts = np.column_stack([rng.uniform(-5, 5, (n, 2)) * rng.uniform(0.2, 1.0, 2), rng.uniform(0, 2, n)])
        box = fit_amodal_box(pts, WIDE_PRIOR)

        assert _box_contains(box, pts)

        area = box.size[0] * box.size[1]
        oracle = MultiPoint([tuple(p) for p in pts[:, :2]]).minimum_rotated_rectangle.area
        assert area == pytest.approx(oracle, rel=1e-6, abs=1e-9)
        aabb = np.ptp(pts[:, 0]) * np.ptp(pts[:, 1])
        assert area <= aabb + 1e-9

        theta = rng.uniform(-math.pi, math.pi)
        shift = rng.uniform(-20, 20, 3)
        moved = fit_amodal_box(pts @ _rotation(theta).T + shift, WIDE_PRIOR)
        expected = box_corners_bev(box) @ _rotation(theta)[:2, :2].T + shift[:2]
        actual = box_corners_bev(moved)
        gaps = np.linalg.norm(expected[:, None, :] - actual[None, :, :], axis=2).min(axis=1)
        assert np.all(gaps <= 1e-6)
        assert moved.center[2] == pytest.approx(box.center[2] + shift[2], abs=1e-6)

    @given(seed=st.integers(min_value=0, max_value=2**32 - 1))
    @settings(max_examples=300, deadline=None)
    def test_triangle_fits_are_equivariant(self, seed):
        rng = np.random.default_rng(seed)
        pts = np.column_stack([rng.uniform(-3, 3, (3, 2)), rng.uniform(0, 2, 3)])
        theta = rng.uniform(-math.pi, math.pi)
        box = fit_amodal_box(pts, WIDE_PRIOR)
        moved = fit_amodal_box(pts @ _rotation(theta).T, WIDE_PRIOR)
        expected = box_corners_bev(box) @ _rotation(theta)[:2, :2].T
        gaps = np.linalg.norm(expected[:, None, :] - box_corners_bev(moved)[None, :, :], axis=2).min(axis=1)
        assert np.all(gaps <= 1e-6)

    @given(seed=st.integers(min_value=0, max_value=2**32 - 1))
    @settings(max_examples=100, deadline=None)
    def test_l_outline_follows_the_faces(self, seed):
        rng = np.random.default_rng(seed)
        theta = rng.uniform(-math.pi, math.pi)
        shift = np.array([*rng.uniform(-30, 30, 2), 0.0])
        box = fit_amodal_box(_l_outline() @ _rotation(theta).T + shift, DEFAULT_PRIORS[ClassLabel.CAR])
        expected = _rotation(theta) @ np.array([2.0, 0.9, 0.0]) + shift
        np.testing.assert_allclose(box.center[:2], expected[:2], atol=1e-6)
        np.testing.assert_allclose(box.size[:2], (4.0, 1.8), atol=1e-6)
        assert math.sin(box.yaw - theta) == pytest.approx(0.0, abs=1e-9)


class TestEstimate:
    def test_empty_after_segmentation(self):
        inst = _instance(np.array([[5.0, 0.0, -1.8], [5.1, 0.0, -1.75]]))
        assert estimate(inst, {}, ground_z=-1.8) is None

    def test_propagates_score_class_camera(self):
        pts = _rectangle_perimeter(4.0, 1.8, [-1.5, -0.5]) + np.array([10.0, 0.0, 0.0])
        box = GeometricBoxEstimator().estimate(_instance(pts, score=0.7, camera_id=3))
        assert box.class_label is ClassLabel.CAR
        assert box.score == pytest.approx(0.7)
        assert box.camera_id == 3

    def test_simulated_car(self):
        rig = default_rig()
        # two faces visible: rear and right side
        world = make_world(make_agent(1, 8.0, 6.0, yaw=0.0, size=(4.0, 1.8, 1.6)))
        cloud, labels = render_lidar(world, rig, NoiseSpec.zero())
        pts = cloud.points[labels == 1]
        assert pts.shape[0] > 100
        estimator = GeometricBoxEstimator(ground_z=rig.ground_z, amodal_mode=AmodalMode.ANCHORED)
        box = estimator.estimate(_instance(pts))
        assert np.hypot(box.center[0] - 8.0, box.center[1] - 6.0) < 0.2
        assert abs(box.yaw) < math.radians(2.0)


class TestBoxGeometry:
    def test_corners_axis_aligned(self):
        corners = box_corners_bev(Box3D((0, 0, 0), (4, 2, 1), 0.0, ClassLabel.CAR))
        np.testing.assert_allclose(corners.min(axis=0), (-2, -1))
        np.testing.assert_allclose(corners.max(axis=0), (2, 1))

    def test_transform_box_into_vehicle_frame(self):
        box = Box3D((10.0, 2.0, -1.0), (4, 2, 1.5), 0.3, ClassLabel.CAR, score=0.6, camera_id=1)
        moved = transform_box(box, Pose.from_yaw(0.5, (1.0, 0.0, 1.8)))
        assert moved.yaw == pytest.approx(0.8)
        assert moved.center[2] == pytest.approx(0.8)
        assert moved.score == 0.6 and moved.camera_id == 1

    def test_invalid_size(self):
        with pytest.raises(ValueError):
            Box3D((0, 0, 0), (4, 0, 1), 0.0, ClassLabel.CAR)

    def test_prior_ordering(self):
        with pytest.raises(ValueError):
            SizePrior(ClassLabel.CAR, (4, 2, 1.5), (5, 1, 1), (6, 3, 2))
