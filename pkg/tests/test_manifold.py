import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pedfuse.manifold import (
    DegenerateRotationError,
    Pose,
    adjoint,
    compose,
    exp_map,
    inverse,
    log_map,
    matrix_to_quat,
    numeric_jacobian,
    quat_to_matrix,
    rotz,
)

finite = st.floats(-5.0, 5.0, allow_nan=False)


def tangent(max_angle=3.0):
    return st.tuples(*[finite] * 6).map(np.array).map(lambda xi: _clip_rot(xi, max_angle))


def _clip_rot(xi, max_angle):
    w = xi[:3]
    n = np.linalg.norm(w)
    if n > max_angle:
        xi = xi.copy()
        xi[:3] *= max_angle / n
    return xi


def random_pose(rng):
    w = rng.normal(size=3)
    w *= rng.uniform(0, 3.0) / np.linalg.norm(w)
    return exp_map(np.concatenate([w, rng.normal(scale=3, size=3)]))


class TestCompose:
    def test_identity(self):
        assert compose(Pose.identity(), Pose.identity()).allclose(Pose.identity())

    def test_translations(self):
        out = compose(Pose.from_translation(1, 0, 0), Pose.from_translation(0, 2, 0))
        assert out.allclose(Pose.from_translation(1, 2, 0))

    def test_rotation_then_translation(self):
        out = compose(Pose(rotz(np.pi / 2), np.zeros(3)), Pose.from_translation(1, 0, 0))
        np.testing.assert_allclose(out.translation, [0, 1, 0], atol=1e-12)
        np.testing.assert_allclose(out.rotation, rotz(np.pi / 2), atol=1e-12)

    def test_inverse_gives_identity(self):
        rng = np.random.default_rng(1)
        for _ in range(20):
            a = random_pose(rng)
            assert compose(a, inverse(a)).allclose(Pose.identity(), atol=1e-9)

    def test_associative(self):
        rng = np.random.default_rng(2)
        a, b, c = (random_pose(rng) for _ in range(3))
        assert compose(compose(a, b), c).allclose(compose(a, compose(b, c)), atol=1e-9)

    def test_rotation_invariants(self):
        rng = np.random.default_rng(3)
        for _ in range(20):
            R = compose(random_pose(rng), random_pose(rng)).rotation
            np.testing.assert_allclose(R.T @ R, np.eye(3), atol=1e-9)
            assert abs(np.linalg.det(R) - 1.0) < 1e-9


class TestExpLog:
    def test_log_identity(self):
        np.testing.assert_array_equal(log_map(Pose.identity()), np.zeros(6))

    def test_log_translation(self):
        np.testing.assert_allclose(log_map(Pose.from_translation(0.3)), [0, 0, 0, 0.3, 0, 0], atol=1e-15)

    def test_exp_zero(self):
        assert exp_map(np.zeros(6)).allclose(Pose.identity())

    def test_exp_rotz(self):
        np.testing.assert_allclose(exp_map([0, 0, np.pi / 2, 0, 0, 0]).rotation, rotz(np.pi / 2), atol=1e-12)

    def test_exp_translation(self):
        assert exp_map([0, 0, 0, 1.5, -2.0, 0.25]).allclose(Pose.from_translation(1.5, -2.0, 0.25))

    def test_log_at_pi_is_distinct_error(self):
        with pytest.raises(DegenerateRotationError):
            log_map(Pose(rotz(np.pi), np.zeros(3)))

    def test_small_angles(self):
        xi = np.array([1e-10, -2e-10, 3e-11, 0.5, 0.1, -0.2])
        np.testing.assert_allclose(log_map(exp_map(xi)), xi, atol=1e-12)

    @settings(max_examples=200, deadline=None)
    @given(tangent(3.0))
    def test_round_trip(self, xi):
        assert np.max(np.abs(log_map(exp_map(xi)) - xi)) <= 1e-9


class TestAdjoint:
    def test_identity(self):
        np.testing.assert_array_equal(adjoint(Pose.identity()), np.eye(6))

    def test_rotz_on_translation(self):
        out = adjoint(Pose(rotz(np.pi / 2), np.zeros(3))) @ np.array([0, 0, 0, 1, 0, 0])
        np.testing.assert_allclose(out, [0, 0, 0, 0, 1, 0], atol=1e-12)

    def test_inverse(self):
        rng = np.random.default_rng(4)
        for _ in range(20):
            a = random_pose(rng)
            np.testing.assert_allclose(adjoint(a) @ adjoint(inverse(a)), np.eye(6), atol=1e-9)

    @settings(max_examples=100, deadline=None)
    @given(tangent(3.0), tangent(3.0))
    def test_homomorphism(self, xa, xb):
        a, b = exp_map(xa), exp_map(xb)
        assert np.max(np.abs(adjoint(compose(a, b)) - adjoint(a) @ adjoint(b))) <= 1e-9

    def test_transports_tangents(self):
        # T exp(xi) T^-1 = exp(Adj(T) xi)
        rng = np.random.default_rng(5)
        T = random_pose(rng)
        xi = rng.normal(scale=0.3, size=6)
        lhs = compose(compose(T, exp_map(xi)), inverse(T))
        assert lhs.allclose(exp_map(adjoint(T) @ xi), atol=1e-9)


class TestNumericJacobian:
    def test_square(self):
        J = numeric_jacobian(lambda x: x * x, 3.0, 1e-6)
        assert abs(J[0, 0] - 6.0) <= 1e-6

    def test_right_perturbation_convention(self):
        T = random_pose(np.random.default_rng(6))
        J = numeric_jacobian(lambda X: log_map(compose(inverse(T), X)), T, 1e-6)
        np.testing.assert_allclose(J, np.eye(6), atol=1e-6)

    def test_constant(self):
        J = numeric_jacobian(lambda x, y: np.ones(2), [1.0, Pose.identity()], 1e-6)
        assert J.shape == (2, 7)
        np.testing.assert_array_equal(J, 0.0)

    def test_rejects_bad_eps(self):
        with pytest.raises(ValueError):
            numeric_jacobian(lambda x: x, 1.0, 0.0)


def test_quaternion_round_trip():
    rng = np.random.default_rng(7)
    for _ in range(20):
        R = random_pose(rng).rotation
        q = matrix_to_quat(R)
        assert abs(np.linalg.norm(q) - 1.0) < 1e-12
        np.testing.assert_allclose(quat_to_matrix(q), R, atol=1e-12)


def test_pose_is_immutable():
    p = Pose.from_translation(1.0)
    with pytest.raises(ValueError):
        p.translation[0] = 2.0
