import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gpslio.geom import (
    Rotation,
    Se3Pose,
    Twist,
    left_jacobian,
    left_jacobian_inverse,
    pose_exp,
    pose_log,
    quats_to_matrices,
    read_tum,
    right_jacobian_inverse,
    right_jacobian_inverse_batch,
    rot_exp,
    rot_log,
    rotation_angle_between,
    se3_exp_batch,
    skew,
    so3_exp_batch,
    so3_log_batch,
    write_tum,
)

from conftest import random_pose, random_rotation

finite = st.floats(-3.0, 3.0, allow_nan=False)
vec3 = st.tuples(finite, finite, finite).map(np.array)


@pytest.mark.parametrize(
    "omega, v, expected",
    [
        ([0, 0, math.pi / 2], [1, 0, 0], [0, 1, 0]),
        ([math.pi / 2, 0, 0], [0, 1, 0], [0, 0, 1]),
        ([0, math.pi, 0], [1, 0, 0], [-1, 0, 0]),
        ([0, 0, 0], [1, 2, 3], [1, 2, 3]),
    ],
)
def test_rot_exp_known_rotations(omega, v, expected):
    assert np.allclose(rot_exp(omega).apply(v), expected, atol=1e-15)


def test_quaternion_is_canonical_and_unit():
    r = Rotation(np.array([-2.0, 0.0, 0.0, 0.0]))
    assert r.quat.tolist() == [1.0, 0.0, 0.0, 0.0]
    with pytest.raises(ValueError):
        Rotation(np.zeros(4))
    with pytest.raises(ValueError):
        Rotation(np.array([1.0, np.nan, 0.0, 0.0]))


def test_from_xyzw_order():
    r = Rotation.from_xyzw(0.0, 0.0, math.sin(0.25), math.cos(0.25))
    assert r.xyzw == pytest.approx((0.0, 0.0, math.sin(0.25), math.cos(0.25)))
    assert rot_log(r) == pytest.approx([0.0, 0.0, 0.5])


@settings(max_examples=200, deadline=None)
@given(vec3)
def test_exp_log_round_trip(omega):
    theta = np.linalg.norm(omega)
    if theta > math.pi - 1e-6:
        omega = omega / theta * (math.pi - 1e-3)
    assert np.allclose(rot_log(rot_exp(omega)), omega, atol=1e-12)


def test_log_at_half_turn():
    w = rot_log(rot_exp([0.0, math.pi, 0.0]))
    assert np.linalg.norm(w) == pytest.approx(math.pi, abs=1e-15)


def test_matrix_round_trip(rng):
    for _ in range(50):
        r = random_rotation(rng, 2.0)
        assert np.allclose(Rotation.from_matrix(r.matrix).quat, r.quat, atol=1e-14)
        assert np.allclose(r.matrix @ r.matrix.T, np.eye(3), atol=1e-14)


def test_pose_compose_and_inverse(rng):
    a, b = random_pose(rng), random_pose(rng)
    p = rng.normal(size=3)
    assert np.allclose((a * b).apply(p), a.apply(b.apply(p)), atol=1e-12)
    ident = a * a.inverse()
    assert np.allclose(ident.matrix, np.eye(4), atol=1e-13)
    assert np.allclose((a * b).matrix, a.matrix @ b.matrix, atol=1e-12)


def test_pose_apply_batch_matches_single(rng):
    pose = random_pose(rng)
    pts = rng.normal(size=(7, 3))
    assert np.allclose(pose.apply(pts), [pose.apply(p) for p in pts], atol=1e-14)


def test_pose_values_are_immutable():
    pose = Se3Pose(translation=[1.0, 2.0, 3.0])
    with pytest.raises(ValueError):
        pose.translation[0] = 5.0


@settings(max_examples=100, deadline=None)
@given(vec3, vec3)
def test_se3_exp_log_round_trip(w, v):
    if np.linalg.norm(w) > math.pi - 1e-3:
        w = w / np.linalg.norm(w) * 3.0
    xi = Twist(w, v)
    back = pose_log(pose_exp(xi)).vector()
    assert np.allclose(back, xi.vector(), atol=1e-9)


def test_se3_exp_pure_translation():
    pose = pose_exp(Twist([0, 0, 0], [1.0, -2.0, 0.5]))
    assert pose.translation.tolist() == [1.0, -2.0, 0.5]
    assert pose.rotation == Rotation.identity()


def test_left_jacobian_inverse(rng):
    for scale in (1e-9, 1e-3, 1.0, 2.5):
        w = rng.normal(size=3) * scale
        assert np.allclose(left_jacobian(w) @ left_jacobian_inverse(w), np.eye(3), atol=1e-12)


def test_right_jacobian_inverse_numerically(rng):
    # exp(phi + J_r^-1 d) ~ exp(phi) exp(d) to first order in d.
    phi = rng.normal(size=3)
    d = rng.normal(size=3) * 1e-6
    lhs = rot_log(rot_exp(phi) * rot_exp(d))
    assert np.allclose(lhs, phi + right_jacobian_inverse(phi) @ d, atol=1e-11)


def test_batch_helpers_match_scalar(rng):
    ws = np.vstack([rng.normal(size=(50, 3)), np.full((1, 3), 1e-10), [[math.pi - 1e-5, 0.0, 0.0]]])
    mats = so3_exp_batch(ws)
    assert np.allclose(mats, [rot_exp(w).matrix for w in ws], atol=1e-14)
    assert np.allclose(so3_log_batch(mats), [rot_log(rot_exp(w)) for w in ws], atol=1e-9)
    assert np.allclose(right_jacobian_inverse_batch(ws), [right_jacobian_inverse(w) for w in ws], atol=1e-12)
    xis = rng.normal(size=(10, 6))
    rs, ts = se3_exp_batch(xis)
    for x, r, t in zip(xis, rs, ts):
        p = pose_exp(Twist.from_vector(x))
        assert np.allclose(r, p.rotation.matrix, atol=1e-13) and np.allclose(t, p.translation, atol=1e-13)
    q = np.array([[1.0, 0.0, 0.0, 0.0], [0.0, 0.0, 0.0, 1.0]])
    assert np.allclose(quats_to_matrices(q)[1], np.diag([-1.0, -1.0, 1.0]))


def test_skew_is_cross_product(rng):
    a, b = rng.normal(size=3), rng.normal(size=3)
    assert np.allclose(skew(a) @ b, np.cross(a, b))


def test_rotation_angle_between():
    a = rot_exp([0.0, 0.0, 0.1])
    b = rot_exp([0.0, 0.0, -0.2])
    assert rotation_angle_between(a, b) == pytest.approx(0.3, abs=1e-15)


def test_tum_round_trip(tmp_path, rng):
    poses = [random_pose(rng) for _ in range(5)]
    stamps = np.arange(5) * 0.1
    path = tmp_path / "traj.tum"
    write_tum(path, stamps, poses, header="line one\nline two")
    text = path.read_text().splitlines()
    assert text[0] == "# line one" and text[1] == "# line two"
    t, back = read_tum(path)
    assert np.allclose(t, stamps, atol=1e-12)
    for a, b in zip(poses, back):
        assert np.allclose(a.matrix, b.matrix, atol=1e-15)
