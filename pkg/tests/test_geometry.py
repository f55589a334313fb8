import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.spatial.transform import Rotation

from oracles import iou_sampled
from protolabel.errors import DataValidityError
from protolabel.geometry import (
    Box3D,
    Pose,
    bev_iou,
    box_corners,
    compose_poses,
    invert_pose,
    iou_3d,
    normalize_angle,
    points_in_box,
    transform_box,
    transform_points,
)

finite = st.floats(-50, 50, allow_nan=False)
dims = st.floats(0.5, 6.0)
angles = st.floats(-10.0, 10.0)
boxes = st.builds(Box3D, finite, finite, st.floats(-2, 2), dims, dims, dims, angles)


def random_pose(rng):
    r = Rotation.random(random_state=rng).as_matrix()
    return Pose(r, rng.uniform(-20, 20, 3))


class TestTransforms:
    def test_identity_pose_keeps_points(self):
        pts = np.random.default_rng(0).normal(size=(50, 4))
        np.testing.assert_array_equal(transform_points(pts, Pose.identity()), pts)

    def test_quarter_turn(self):
        out = transform_points([[1.0, 0.0, 0.0]], Pose.from_yaw(math.pi / 2))
        np.testing.assert_allclose(out, [[0.0, 1.0, 0.0]], atol=1e-9)

    def test_round_trip_1000_points(self):
        rng = np.random.default_rng(1)
        pts = rng.uniform(-100, 100, size=(1000, 3))
        pose = random_pose(rng)
        back = transform_points(transform_points(pts, pose), invert_pose(pose))
        np.testing.assert_allclose(back, pts, atol=1e-9)

    def test_intensity_column_untouched(self):
        pts = np.array([[1.0, 2.0, 3.0, 0.25]])
        out = transform_points(pts, Pose.from_yaw(0.3, (1, 2, 3)))
        assert out[0, 3] == 0.25

    def test_nan_point_rejected(self):
        with pytest.raises(DataValidityError):
            transform_points([[0.0, float("nan"), 0.0]], Pose.identity())

    def test_invert_identity(self):
        assert invert_pose(Pose.identity()) == Pose.identity()

    def test_invert_translation(self):
        inv = invert_pose(Pose(np.eye(3), [1.0, 2.0, 3.0]))
        np.testing.assert_array_equal(inv.translation, [-1.0, -2.0, -3.0])

    def test_compose_with_inverse_is_identity(self):
        rng = np.random.default_rng(2)
        for _ in range(20):
            pose = random_pose(rng)
            m = compose_poses(pose, invert_pose(pose)).matrix()
            np.testing.assert_allclose(m, np.eye(4), atol=1e-9)

    def test_non_orthonormal_rotation_rejected(self):
        with pytest.raises(DataValidityError):
            Pose(np.diag([1.0, 1.0, 1.1]))
        with pytest.raises(DataValidityError):
            Pose(np.diag([1.0, 1.0, -1.0]))  # reflection

    def test_transform_box_matches_corner_transform(self):
        box = Box3D(3, -1, 0.5, 4.0, 2.0, 1.5, 0.4)
        pose = Pose.from_yaw(1.1, (5, 6, 0.2))
        moved = box_corners(transform_box(box, pose))
        expected = transform_points(box_corners(box), pose)
        np.testing.assert_allclose(moved, expected, atol=1e-9)


class TestBox:
    def test_unit_cube_corners(self):
        c = box_corners(Box3D(0, 0, 0, 1, 1, 1, 0))
        np.testing.assert_allclose(np.sort(np.abs(c), axis=0), np.full((8, 3), 0.5))
        assert len({tuple(np.sign(r)) for r in c}) == 8

    def test_quarter_turn_swaps_l_and_w(self):
        a = box_corners(Box3D(1, 2, 3, 4, 2, 1.5, math.pi / 2))
        b = box_corners(Box3D(1, 2, 3, 2, 4, 1.5, 0.0))
        key = lambda c: sorted(map(tuple, np.round(c, 9)))  # noqa: E731
        assert key(a) == key(b)

    @given(boxes)
    def test_corners_on_circumsphere(self, box):
        r = 0.5 * math.sqrt(box.l**2 + box.w**2 + box.h**2)
        d = np.linalg.norm(box_corners(box) - box.center, axis=1)
        np.testing.assert_allclose(d, r, atol=1e-9)

    @given(boxes)
    def test_corners_periodic_in_alpha(self, box):
        shifted = Box3D(box.x, box.y, box.z, box.l, box.w, box.h, box.alpha + 2 * math.pi)
        np.testing.assert_allclose(box_corners(shifted), box_corners(box), atol=1e-9)

    @given(st.floats(-1e4, 1e4))
    def test_normalize_angle_range(self, a):
        v = normalize_angle(a)
        assert -math.pi <= v < math.pi
        assert math.isclose(math.cos(v), math.cos(a), abs_tol=1e-9)

    def test_non_positive_size_rejected(self):
        with pytest.raises(DataValidityError):
            Box3D(0, 0, 0, 0.0, 1, 1)

    def test_points_in_box(self):
        box = Box3D(0, 0, 0, 2, 1, 1, math.pi / 2)
        mask = points_in_box([[0, 0.9, 0], [0.9, 0, 0]], box)
        assert mask.tolist() == [True, False]


class TestIou:
    def test_identical(self):
        b = Box3D(1, 2, 0, 4, 2, 1.5, 0.7)
        assert bev_iou(b, b) == 1.0
        assert iou_3d(b, b) == 1.0

    def test_far_apart(self):
        a = Box3D(0, 0, 0, 2, 2, 2, 0.3)
        b = Box3D(10, 0, 0, 2, 2, 2, 1.0)
        assert bev_iou(a, b) == 0.0
        assert iou_3d(a, b) == 0.0

    def test_half_offset_footprints(self):
        a = Box3D(0, 0, 0, 1, 1, 1, 0)
        b = Box3D(0.5, 0, 0, 1, 1, 1, 0)
        assert bev_iou(a, b) == pytest.approx(1 / 3, abs=1e-9)
        assert iou_3d(a, b) == pytest.approx(1 / 3, abs=1e-9)

    def test_vertically_disjoint(self):
        a = Box3D(0, 0, 0, 2, 2, 1, 0)
        b = Box3D(0, 0, 1.5, 2, 2, 1, 0)
        assert bev_iou(a, b) == 1.0
        assert iou_3d(a, b) == 0.0

    def test_rotated_square_in_square(self):
        # a unit square turned 45 deg inside a 2x2 square: intersection is the whole unit square
        a = Box3D(0, 0, 0, 2, 2, 1, 0)
        b = Box3D(0, 0, 0, 1, 1, 1, math.pi / 4)
        assert bev_iou(a, b) == pytest.approx(0.25, abs=1e-12)

    @given(boxes, boxes)
    @settings(max_examples=300)
    def test_symmetric_and_bounded(self, a, b):
        for fn in (bev_iou, iou_3d):
            v = fn(a, b)
            assert v == fn(b, a)
            assert 0.0 <= v <= 1.0

    @given(boxes, st.floats(-math.pi, math.pi), finite, finite)
    @settings(max_examples=100)
    def test_invariant_under_common_rigid_motion(self, a, yaw, tx, ty):
        b = Box3D(a.x + 0.7, a.y - 0.3, a.z, a.w, a.l, a.h, a.alpha + 0.4)
        pose = Pose.from_yaw(yaw, (tx, ty, 0.0))
        assert bev_iou(transform_box(a, pose), transform_box(b, pose)) == pytest.approx(bev_iou(a, b), abs=1e-9)


def test_iou_agrees_with_sampled_oracle_small():
    """A quick version of the acceptance check; the full 1000-pair run lives in test_acceptance."""
    rng = np.random.default_rng(11)
    for k in range(25):
        a = (0, 0, 0, *rng.uniform(0.5, 6, 3), rng.uniform(-math.pi, math.pi))
        b = (*rng.uniform(-2, 2, 2), rng.uniform(-1, 1), *rng.uniform(0.5, 6, 3), rng.uniform(-math.pi, math.pi))
        ba, bb = Box3D(*a), Box3D(*b)
        assert abs(iou_3d(ba, bb) - iou_sampled(a, b, 20_000, seed=k)) < 0.02
        assert abs(bev_iou(ba, bb) - iou_sampled(a, b, 20_000, bev=True, seed=k)) < 0.02


@given(st.floats(-math.pi, math.pi, exclude_max=True))
def test_normalize_angle_identity_in_range(a):
    assert normalize_angle(a) == a
