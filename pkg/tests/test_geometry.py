import math

import numpy as np
import pytest
from conftest import poses, random_pose, unit_quats
from hypothesis import given, settings
from hypothesis import strategies as st

from hallmap.geometry import (
    DegenerateRotationError,
    PoseSE3,
    Rotation,
    Sim3Transform,
    interpolate_pose,
    interpolate_poses,
    se3_compose,
    se3_exp,
    se3_log,
    slerp,
)


def test_compose_identities():
    I = PoseSE3.identity()
    r = se3_compose(I, I)
    assert r.rotation.angle == 0.0
    assert np.all(r.translation == 0.0)


def test_compose_translate_then_rotate_maps_unit_x():
    # a = translate(1,0,0), b = rot_z(90): x -> R x + t, hand multiplication of the 4x4 matrices
    a = PoseSE3.translate(1, 0, 0)
    b = PoseSE3.rot_z(math.pi / 2)
    T = np.array([[1, 0, 0, 1], [0, 1, 0, 0], [0, 0, 1, 0], [0, 0, 0, 1.0]]) @ np.array(
        [[0, -1, 0, 0], [1, 0, 0, 0], [0, 0, 1, 0], [0, 0, 0, 1.0]]
    )
    np.testing.assert_allclose(se3_compose(a, b).apply([1, 0, 0]), [1, 1, 0], atol=1e-12)
    np.testing.assert_allclose(se3_compose(a, b).as_matrix(), T, atol=1e-12)


@given(poses)
def test_compose_with_inverse_is_identity(p):
    r = se3_compose(p, p.inverse())
    assert r.rotation.angle < 1e-9
    assert np.linalg.norm(r.translation) < 1e-9


@given(poses)
def test_identity_is_neutral_on_both_sides(p):
    I = PoseSE3.identity()
    for q in (I @ p, p @ I):
        np.testing.assert_allclose(q.rotation.q, p.rotation.q, atol=1e-12)
        np.testing.assert_allclose(q.translation, p.translation, atol=1e-12)


@given(poses, poses, st.tuples(*[st.floats(-5, 5, allow_nan=False)] * 3))
def test_compose_applies_right_operand_first(a, b, x):
    np.testing.assert_allclose(se3_compose(a, b).apply(x), a.apply(b.apply(x)), atol=1e-9)


@given(poses, st.tuples(*[st.floats(-5, 5, allow_nan=False)] * 3))
def test_inverse_undoes_apply(p, x):
    np.testing.assert_allclose(p.inverse().apply(p.apply(x)), x, atol=1e-9)


@given(unit_quats, unit_quats)
def test_rotation_stays_unit_after_products(a, b):
    q = a
    for _ in range(50):
        q = q * b
    assert abs(np.linalg.norm(q.q) - 1.0) < 1e-9


def test_exp_of_zero_is_identity():
    p = se3_exp(np.zeros(6))
    assert p.rotation.angle == 0.0
    assert np.all(p.translation == 0.0)


def test_exp_rotation_first_convention():
    # Rodrigues with axis z, angle pi/2: R = [[0,-1,0],[1,0,0],[0,0,1]]
    p = se3_exp([0, 0, math.pi / 2, 0, 0, 0])
    np.testing.assert_allclose(p.rotation.as_matrix(), [[0, -1, 0], [1, 0, 0], [0, 0, 1]], atol=1e-12)
    np.testing.assert_allclose(p.translation, 0.0, atol=1e-15)


def test_exp_log_round_trip_1000_random_poses(rng):
    worst = 0.0
    for _ in range(1000):
        p = random_pose(rng, max_angle=math.pi - 0.01)
        q = se3_exp(se3_log(p))
        worst = max(worst, np.abs(q.as_matrix() - p.as_matrix()).max())
    assert worst < 1e-9


@settings(max_examples=200)
@given(st.floats(1e-12, math.pi - 0.01), st.tuples(*[st.floats(-1, 1)] * 3).filter(lambda v: np.linalg.norm(v) > 0.1),
       st.tuples(*[st.floats(-5, 5)] * 3))
def test_exp_log_round_trip_property(angle, axis, t):
    axis = np.asarray(axis) / np.linalg.norm(axis)
    p = PoseSE3(Rotation.from_rotvec(angle * axis), t)
    q = se3_exp(se3_log(p))
    assert np.abs(q.as_matrix() - p.as_matrix()).max() < 1e-9


def test_small_angle_branch_is_continuous():
    for a in (1e-6, 1e-8, 1e-9, 1e-12):
        xi = np.array([a, 0, 0, 0.3, -0.2, 0.1])
        np.testing.assert_allclose(se3_log(se3_exp(xi)), xi, atol=1e-12)


def test_log_near_pi_is_rejected():
    with pytest.raises(DegenerateRotationError):
        se3_log(PoseSE3(Rotation.rot_z(math.pi - 1e-7)))
    se3_log(PoseSE3(Rotation.rot_z(math.pi - 1e-3)))


def test_interpolation_end_points():
    p0 = PoseSE3(Rotation.rot_x(0.3), (1, 2, 3))
    p1 = PoseSE3(Rotation.rot_y(-0.4), (0, -1, 5))
    assert interpolate_pose(p0, p1, 0.0) == p0
    assert interpolate_pose(p0, p1, 1.0) == p1


def test_interpolation_translation_is_linear():
    p = interpolate_pose(PoseSE3.identity(), PoseSE3.translate(2, 0, 0), 0.5)
    np.testing.assert_allclose(p.translation, [1, 0, 0])
    assert p.rotation.angle == 0.0


def test_interpolation_rotation_halfway():
    # slerp by hand: q(90 deg about z) = (cos 45, 0, 0, sin 45); halfway is (cos 22.5, 0, 0, sin 22.5)
    p = interpolate_pose(PoseSE3.identity(), PoseSE3.rot_z(math.pi / 2), 0.5)
    np.testing.assert_allclose(p.rotation.q, [math.cos(math.pi / 8), 0, 0, math.sin(math.pi / 8)], atol=1e-12)


def test_interpolation_rejects_outside_unit_interval():
    for t in (-0.1, 1.5):
        with pytest.raises(ValueError):
            interpolate_pose(PoseSE3.identity(), PoseSE3.identity(), t)


def test_slerp_takes_shortest_arc():
    a = Rotation.rot_z(0.1)
    b = Rotation(-Rotation.rot_z(-0.1).q)  # same rotation, opposite hemisphere
    assert abs(slerp(a, b, 0.5).angle) < 1e-12


@given(poses, poses, st.lists(st.floats(0, 1), min_size=1, max_size=20))
def test_vectorized_interpolation_matches_scalar(p0, p1, ts):
    R, t = interpolate_poses(p0, p1, np.array(ts))
    for k, tau in enumerate(ts):
        p = interpolate_pose(p0, p1, tau)
        np.testing.assert_allclose(R[k], p.rotation.as_matrix(), atol=1e-9)
        np.testing.assert_allclose(t[k], p.translation, atol=1e-9)


@given(st.floats(0.1, 10), unit_quats, st.tuples(*[st.floats(-5, 5)] * 3),
       st.tuples(*[st.floats(-5, 5)] * 3), st.tuples(*[st.floats(-5, 5)] * 3))
def test_sim3_scales_distances(s, r, t, x, y):
    S = Sim3Transform(s, r, t)
    d0 = np.linalg.norm(np.subtract(x, y))
    d1 = np.linalg.norm(S.apply(x) - S.apply(y))
    assert abs(d1 - s * d0) <= 1e-9 * max(1.0, s * d0)


@given(st.floats(0.1, 10), unit_quats, st.floats(0.1, 10), unit_quats, st.floats(0.1, 10), unit_quats)
def test_sim3_composition_is_associative(s1, r1, s2, r2, s3, r3):
    a = Sim3Transform(s1, r1, (1, 0, 0))
    b = Sim3Transform(s2, r2, (0, 2, 0))
    c = Sim3Transform(s3, r3, (0, 0, 3))
    x = np.array([0.3, -0.7, 1.1])
    np.testing.assert_allclose(((a @ b) @ c).apply(x), (a @ (b @ c)).apply(x), rtol=1e-9, atol=1e-9)


@given(st.floats(0.1, 10), unit_quats)
def test_sim3_inverse(s, r):
    S = Sim3Transform(s, r, (1, -2, 3))
    assert abs(S.inverse().scale - 1 / s) < 1e-12
    x = np.array([0.5, 0.25, -4.0])
    np.testing.assert_allclose(S.inverse().apply(S.apply(x)), x, atol=1e-9)


def test_sim3_rejects_non_positive_scale():
    for s in (0.0, -1.0, float("nan")):
        with pytest.raises(ValueError):
            Sim3Transform(s)


def test_adjoint_conjugates_twists(rng):
    T = random_pose(rng)
    xi = rng.normal(size=6) * 0.1
    lhs = se3_exp(T.adjoint() @ xi)
    rhs = T @ se3_exp(xi) @ T.inverse()
    np.testing.assert_allclose(lhs.as_matrix(), rhs.as_matrix(), atol=1e-12)
