# tests/test_geom.py
import numpy as np
import pytest

from helpers import random_pose
from errors import DegenerateInput
from geom import (
    Pose3, PointCloud, compose, exp_map, inverse, log_map, oriented_bbox, se3_right_jacobian,
    se3_right_jacobian_inv, umeyama_align, voxel_downsample,
)


def assert_pose_close(a: Pose3, b: Pose3, tol: float = 1e-9):
    assert a.between(b).rotation_angle() < tol
    np.testing.assert_allclose(a.translation, b.translation, atol=tol)


# ═══ Pose3 ═══

def test_compose_quarter_turns():
    step = Pose3.from_yaw(np.pi / 2, [1.0, 0.0, 0.0])
    out = compose(step, step)
    np.testing.assert_allclose(out.matrix(), step.matrix() @ step.matrix(), atol=1e-12)
    assert_pose_close(out, Pose3.from_yaw(np.pi, [1.0, 1.0, 0.0]))


def test_group_axioms(rng):
    for _ in range(200):
        a, b, c = (random_pose(rng) for _ in range(3))
        assert_pose_close(compose(Pose3.identity(), a), a)
        assert_pose_close(compose(a, inverse(a)), Pose3.identity())
        assert_pose_close(compose(compose(a, b), c), compose(a, compose(b, c)), tol=1e-8)


def test_quaternion_normalised_with_nonnegative_w(rng):
    for _ in range(100):
        p = compose(random_pose(rng), random_pose(rng))
        assert abs(np.linalg.norm(p.quat) - 1.0) < 1e-9
        assert p.quat[0] >= 0.0


def test_log_identity_is_zero():
    np.testing.assert_allclose(log_map(Pose3.identity()), np.zeros(6), atol=1e-15)


def test_exp_pure_yaw():
    p = exp_map([0.0, 0.0, np.pi / 2, 0.0, 0.0, 0.0])
    assert_pose_close(p, Pose3.from_yaw(np.pi / 2))
    np.testing.assert_allclose(p.translation, np.zeros(3), atol=1e-12)


def test_exp_log_round_trip(rng):
    worst = 0.0
    for _ in range(1000):
        p = random_pose(rng, max_angle=np.pi - 1e-3)
        q = exp_map(log_map(p))
        worst = max(worst, q.between(p).rotation_angle(), float(np.abs(q.translation - p.translation).max()))
    assert worst < 1e-9


def test_log_at_pi_has_positive_leading_component():
    xi = log_map(Pose3.from_rotvec([0.0, -np.pi, 0.0]))
    assert xi[1] == pytest.approx(np.pi)


def test_right_jacobian_inverse(rng):
    for _ in range(20):
        xi = rng.normal(size=6)
        np.testing.assert_allclose(se3_right_jacobian(xi) @ se3_right_jacobian_inv(xi), np.eye(6), atol=1e-9)


# ═══ PointCloud ═══

def test_cloud_rejects_non_finite():
    with pytest.raises(DegenerateInput):
        PointCloud(np.array([[0.0, np.nan, 0.0]]))


def test_cloud_intensity_length():
    with pytest.raises(DegenerateInput):
        PointCloud(np.zeros((3, 3)), intensity=np.zeros(2))


def test_voxel_downsample_keeps_first_point_per_voxel():
    cloud = PointCloud(np.array([[0.1, 0.1, 0.1], [0.2, 0.2, 0.2], [1.1, 0.0, 0.0]]))
    out = voxel_downsample(cloud, 0.5)
    np.testing.assert_allclose(out.points, [[0.1, 0.1, 0.1], [1.1, 0.0, 0.0]])


# ═══ Umeyama ═══

def test_umeyama_identity(rng):
    pts = rng.normal(size=(10, 3))
    assert_pose_close(umeyama_align(pts, pts), Pose3.identity())


def test_umeyama_recovers_transform(rng):
    for _ in range(50):
        pts = rng.normal(size=(10, 3)) * 3.0
        t = random_pose(rng)
        assert_pose_close(umeyama_align(pts, t.transform_points(pts)), t, tol=1e-9)


def test_umeyama_conjugation_invariance(rng):
    src = rng.normal(size=(12, 3))
    dst = random_pose(rng).transform_points(src) + rng.normal(size=(12, 3)) * 0.05
    g = random_pose(rng)
    base = umeyama_align(src, dst)
    moved = umeyama_align(g.transform_points(src), g.transform_points(dst))
    assert_pose_close(moved, g.compose(base).compose(g.inverse()), tol=1e-8)


def test_umeyama_two_points():
    with pytest.raises(DegenerateInput):
        umeyama_align(np.zeros((2, 3)), np.zeros((2, 3)))


def test_umeyama_collinear():
    line = np.outer(np.arange(5.0), [1.0, 2.0, 0.5])
    with pytest.raises(DegenerateInput):
        umeyama_align(line, line)


# ═══ Oriented bounding box ═══

def _box_grid() -> np.ndarray:
    x, y, z = np.meshgrid(np.linspace(0, 100, 21), np.linspace(0, 8, 5), np.linspace(0, 5, 3), indexing="ij")
    return np.stack([x.ravel(), y.ravel(), z.ravel()], axis=1)


def test_obb_axis_aligned_box():
    box = oriented_bbox(PointCloud(_box_grid()))
    np.testing.assert_allclose(box.extents, [100.0, 8.0, 5.0], atol=1e-6)
    np.testing.assert_allclose(box.axes @ box.axes.T, np.eye(3), atol=1e-9)


def test_obb_rotation_invariant(rng):
    pts = _box_grid()
    for _ in range(10):
        moved = random_pose(rng).transform_points(pts)
        np.testing.assert_allclose(oriented_bbox(PointCloud(moved)).extents, [100.0, 8.0, 5.0], atol=1e-6)


def test_obb_identical_points_give_zero_extents():
    box = oriented_bbox(PointCloud(np.ones((5, 3))))
    np.testing.assert_allclose(box.extents, np.zeros(3), atol=1e-12)


def test_obb_needs_three_points():
    with pytest.raises(DegenerateInput):
        oriented_bbox(PointCloud(np.zeros((2, 3))))
