import numpy as np
import pytest

from pushplan import (
    MetricWeights,
    Pose,
    Twist,
    compose,
    exp_twist,
    identity_pose,
    interpolate_pose,
    invert,
    log_pose,
    pose_distance,
    relative_twist,
    step_pose,
    twist_metric_norm,
)
from pushplan.se3 import (
    poses_allclose,
    rotation_angle,
    rotation_from_rotvec,
    rotation_from_rpy_degrees,
    rotvec_from_rotation,
    rpy_degrees,
    skew,
    twist_metric_inner,
)


def random_rotvec(rng, max_angle=3.0):
    # keep |r| below pi so the canonical log branch is the one we started from
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    return axis * rng.uniform(0.0, max_angle)


def random_pose(rng):
    t = rng.normal(scale=10.0, size=3)
    return Pose(rotation_from_rotvec(random_rotvec(rng)), t)


def random_twist(rng, scale=1.0):
    return Twist(rng.normal(scale=scale, size=3), rng.normal(scale=0.3 * scale, size=3))


def test_skew_reproduces_cross_product():
    rng = np.random.default_rng(0)
    for _ in range(20):
        a = rng.normal(size=3)
        b = rng.normal(size=3)
        np.testing.assert_allclose(skew(a) @ b, np.cross(a, b), atol=1e-12)


def test_rotvec_round_trip():
    rng = np.random.default_rng(1)
    for _ in range(50):
        r = random_rotvec(rng)
        R = rotation_from_rotvec(r)
        np.testing.assert_allclose(R @ R.T, np.eye(3), atol=1e-12)
        assert np.linalg.det(R) == pytest.approx(1.0, abs=1e-12)
        np.testing.assert_allclose(rotvec_from_rotation(R), r, atol=1e-9)


def test_rotation_angle_matches_rotvec_norm():
    rng = np.random.default_rng(2)
    for _ in range(20):
        r = random_rotvec(rng)
        R = rotation_from_rotvec(r)
        assert rotation_angle(R) == pytest.approx(np.linalg.norm(r), abs=1e-9)


def test_compose_invert_identity():
    rng = np.random.default_rng(3)
    for _ in range(20):
        p = random_pose(rng)
        q = compose(p, invert(p))
        assert poses_allclose(q, identity_pose(), tol=1e-10)


def test_exp_log_round_trip():
    rng = np.random.default_rng(4)
    for _ in range(50):
        t = random_twist(rng)
        back = log_pose(exp_twist(t))
        np.testing.assert_allclose(back.linear, t.linear, atol=1e-9)
        np.testing.assert_allclose(back.angular, t.angular, atol=1e-9)


def test_exp_pure_translation():
    t = Twist((1.0, -2.0, 3.0), (0.0, 0.0, 0.0))
    p = exp_twist(t)
    np.testing.assert_allclose(p.rotation, np.eye(3), atol=1e-12)
    np.testing.assert_allclose(p.translation, [1.0, -2.0, 3.0], atol=1e-12)


def test_step_pose_body_frame():
    # a body-frame +x twist applied after a 90 degree yaw moves the pose
    # along the world +y axis
    p = Pose(rotation_from_rpy_degrees([0.0, 0.0, 90.0]), np.zeros(3))
    stepped = step_pose(p, Twist((1.0, 0.0, 0.0), (0.0, 0.0, 0.0)))
    np.testing.assert_allclose(stepped.translation, [0.0, 1.0, 0.0], atol=1e-12)


def test_relative_twist_steps_a_onto_b():
    rng = np.random.default_rng(5)
    for _ in range(30):
        a = random_pose(rng)
        b = random_pose(rng)
        t = relative_twist(a, b)
        assert poses_allclose(step_pose(a, t), b, tol=1e-9)


def test_interpolate_pose_endpoints_and_midpoint():
    rng = np.random.default_rng(6)
    a = random_pose(rng)
    b = random_pose(rng)
    assert poses_allclose(interpolate_pose(a, b, 0.0), a, tol=1e-12)
    assert poses_allclose(interpolate_pose(a, b, 1.0), b, tol=1e-9)
    mid = interpolate_pose(a, b, 0.5)
    assert pose_distance(a, mid) == pytest.approx(pose_distance(mid, b), rel=1e-9)
    with pytest.raises(ValueError):
        interpolate_pose(a, b, 1.5)


def test_pose_distance_metric_axioms():
    rng = np.random.default_rng(7)
    w = MetricWeights()
    for _ in range(20):
        a = random_pose(rng)
        b = random_pose(rng)
        c = random_pose(rng)
        # identity distance bottoms out at arccos precision, sqrt(eps)-ish
        assert pose_distance(a, a, w) == pytest.approx(0.0, abs=1e-5)
        assert pose_distance(a, b, w) == pytest.approx(pose_distance(b, a, w), rel=1e-9)
        assert pose_distance(a, c, w) <= pose_distance(a, b, w) + pose_distance(b, c, w) + 1e-9


def test_default_rotation_weight_three_degrees_per_mm():
    w = MetricWeights()
    p = identity_pose()
    q_rot = Pose(rotation_from_rpy_degrees([0.0, 3.0, 0.0]), np.zeros(3))
    q_trans = Pose(np.eye(3), [1.0, 0.0, 0.0])
    assert pose_distance(p, q_rot, w) == pytest.approx(pose_distance(p, q_trans, w), rel=1e-9)


def test_biased_weights_rescale_rotation_share():
    w = MetricWeights().biased(0.2)
    assert w.rotation == pytest.approx(MetricWeights().rotation / 5.0)
    assert w.translation == 1.0


def test_twist_metric_norm_consistent_with_inner():
    rng = np.random.default_rng(8)
    w = MetricWeights()
    for _ in range(20):
        t = random_twist(rng)
        n = twist_metric_norm(t, w)
        assert n * n == pytest.approx(twist_metric_inner(t, t, w), rel=1e-9)


def test_rpy_round_trip():
    rng = np.random.default_rng(9)
    for _ in range(30):
        angles = rng.uniform(-80.0, 80.0, size=3)
        R = rotation_from_rpy_degrees(angles)
        np.testing.assert_allclose(rpy_degrees(R), angles, atol=1e-8)
