import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pedfuse.factors import (
    Cauchy,
    DegenerateGeometryError,
    FactorWeight,
    FactorWeights,
    StepMeasurement,
    VelocityMeasurement,
    apply_robust_weight,
    coarse_loop_residual,
    pdr_motion_residual,
    prior_residual,
    range_residual,
    robust_cost,
    ronin_motion_residual,
    scale_smooth_residual,
)
from pedfuse.jacobian_check import random_pose
from pedfuse.manifold import Pose, adjoint, compose, exp_map, inverse, numeric_jacobian, rotz

I3 = np.eye(3)


def scalar(x) -> float:
    return float(np.ravel(x)[0])


def stacked(jacobians):
    return np.concatenate([np.atleast_2d(h) for h in jacobians], axis=1)


class TestPdrMotion:
    m = StepMeasurement(I3, [1, 0, 0])

    def test_exact_step(self):
        ev = pdr_motion_residual(Pose.identity(), Pose.from_translation(0.7), 0.7, self.m)
        np.testing.assert_allclose(ev.residual, np.zeros(6), atol=1e-12)

    def test_overshoot(self):
        ev = pdr_motion_residual(Pose.identity(), Pose.from_translation(1.0), 0.7, self.m)
        np.testing.assert_allclose(ev.residual, [0, 0, 0, 0.3, 0, 0], atol=1e-12)

    def test_scale_jacobian(self):
        ev = pdr_motion_residual(Pose.identity(), Pose.from_translation(1.0), 0.7, self.m)
        np.testing.assert_allclose(ev.jacobians[2].ravel(), [0, 0, 0, -1, 0, 0])

    def test_pose_jacobians_at_zero_residual(self):
        rng = np.random.default_rng(0)
        m = StepMeasurement(rotz(0.3), [0.6, 0.8, 0])
        t0 = random_pose(rng)
        t1 = compose(t0, Pose(rotz(0.3), 0.9 * np.array([0.6, 0.8, 0])))
        ev = pdr_motion_residual(t0, t1, 0.9, m)
        np.testing.assert_allclose(ev.jacobians[0], -adjoint(inverse(compose(inverse(t0), t1))), atol=1e-12)
        np.testing.assert_allclose(ev.jacobians[1], np.eye(6))
        Jn = numeric_jacobian(lambda a, b, s: pdr_motion_residual(a, b, s, m).residual, [t0, t1, 0.9])
        np.testing.assert_allclose(stacked(ev.jacobians), Jn, atol=1e-6)

    def test_scale_linearity_with_identity_rotations(self):
        u = np.array([0.6, 0.8, 0.0])
        m = StepMeasurement(I3, u)
        t1 = Pose.from_translation(0.4, -0.3, 0.1)
        r = [pdr_motion_residual(Pose.identity(), t1, s, m).residual for s in (0.5, 1.0, 1.5)]
        np.testing.assert_allclose((r[1] - r[0]) / 0.5, np.concatenate([np.zeros(3), -u]), atol=1e-12)
        np.testing.assert_allclose(r[2] - r[1], r[1] - r[0], atol=1e-12)

    def test_direction_must_be_unit(self):
        with pytest.raises(ValueError):
            StepMeasurement(I3, [1.0, 1.0, 0.0])


class TestRoninMotion:
    def test_exact(self):
        m = VelocityMeasurement([1.2, 0.0], 1.0)
        ev = ronin_motion_residual(Pose.identity(), Pose.from_translation(1.2), 1.0, m)
        np.testing.assert_allclose(ev.residual, 0.0, atol=1e-12)

    def test_scaled(self):
        m = VelocityMeasurement([2.0, 0.0], 1.0)
        ev = ronin_motion_residual(Pose.identity(), Pose.from_translation(1.0), 0.5, m)
        np.testing.assert_allclose(ev.residual, 0.0, atol=1e-12)

    def test_scale_jacobian(self):
        m = VelocityMeasurement([2.0, 1.0], 0.5)
        ev = ronin_motion_residual(Pose.identity(), Pose.from_translation(1.0), 1.0, m)
        np.testing.assert_allclose(ev.jacobians[2].ravel(), [0, 0, 0, -1.0, -0.5, 0])

    def test_pose_jacobians_match_pdr_form(self):
        rng = np.random.default_rng(1)
        m = VelocityMeasurement([0.5, -1.0], 0.2)
        t0 = random_pose(rng)
        t1 = compose(t0, Pose.from_translation(0.7 * 0.1, -0.7 * 0.2))
        ev = ronin_motion_residual(t0, t1, 0.7, m)
        np.testing.assert_allclose(ev.residual, 0.0, atol=1e-12)
        np.testing.assert_allclose(ev.jacobians[0], -adjoint(inverse(compose(inverse(t0), t1))), atol=1e-12)
        np.testing.assert_allclose(ev.jacobians[1], np.eye(6))

    def test_rejects_nonpositive_dt(self):
        with pytest.raises(ValueError):
            VelocityMeasurement([1.0, 0.0], 0.0)


class TestScaleSmooth:
    def test_equal(self):
        assert scale_smooth_residual(0.7, 0.7).residual == pytest.approx(0.0)

    def test_difference(self):
        assert scalar(scale_smooth_residual(0.7, 0.9).residual) == pytest.approx(0.2)

    @settings(max_examples=50, deadline=None)
    @given(st.floats(0.2, 3.0), st.floats(0.2, 3.0))
    def test_jacobians(self, a, b):
        Hi, Hj = scale_smooth_residual(a, b).jacobians
        assert float(np.ravel(Hi)[0]) == -1.0 and float(np.ravel(Hj)[0]) == 1.0


class TestCoarseLoop:
    def test_inside_radius(self):
        ev = coarse_loop_residual(Pose.identity(), Pose.from_translation(1.0), 2.0)
        assert scalar(ev.residual) == 0.0
        for H in ev.jacobians:
            np.testing.assert_array_equal(H, 0.0)

    def test_outside_radius(self):
        ev = coarse_loop_residual(Pose.identity(), Pose.from_translation(3.0), 2.0)
        assert scalar(ev.residual) == pytest.approx(1.0)

    def test_printed_jacobians(self):
        rng = np.random.default_rng(2)
        ti, tj = random_pose(rng), random_pose(rng)
        q = ti.rotation.T @ (tj.translation - ti.translation)
        qn = q / np.linalg.norm(q)
        ev = coarse_loop_residual(ti, tj, 0.5)
        block = np.array([[0, -q[2], q[1], -1, 0, 0], [q[2], 0, -q[0], 0, -1, 0], [-q[1], q[0], 0, 0, 0, -1]])
        np.testing.assert_allclose(np.ravel(ev.jacobians[0]), qn @ block, atol=1e-12)
        np.testing.assert_allclose(np.ravel(ev.jacobians[1]), np.concatenate([np.zeros(3), qn @ ti.rotation.T @ tj.rotation]),
                                   atol=1e-12)

    def test_continuity_at_radius(self):
        for eps in (1e-9, -1e-9):
            ev = coarse_loop_residual(Pose.identity(), Pose.from_translation(2.0 + eps), 2.0)
            assert abs(scalar(ev.residual)) < 1e-8

    def test_degenerate_zero_radius(self):
        ev = coarse_loop_residual(Pose.identity(), Pose.identity(), 0.0)
        assert ev.degenerate and scalar(ev.residual) == 0.0
        for H in ev.jacobians:
            np.testing.assert_array_equal(H, 0.0)

    def test_matches_finite_differences(self):
        rng = np.random.default_rng(3)
        for _ in range(20):
            ti, tj = random_pose(rng), random_pose(rng)
            ev = coarse_loop_residual(ti, tj, 0.3)
            Jn = numeric_jacobian(lambda a, b: coarse_loop_residual(a, b, 0.3).residual, [ti, tj])
            np.testing.assert_allclose(stacked(ev.jacobians), Jn, atol=1e-6)

    def test_negative_radius(self):
        with pytest.raises(ValueError):
            coarse_loop_residual(Pose.identity(), Pose.identity(), -1.0)


class TestRange:
    def test_simple(self):
        assert scalar(range_residual(Pose.identity(), [5, 0, 0], 4.0).residual) == pytest.approx(1.0)

    def test_345(self):
        assert scalar(range_residual(Pose.identity(), [3, 4, 0], 5.0).residual) == pytest.approx(0.0, abs=1e-12)

    def test_anchor_jacobian(self):
        tu = Pose.from_translation(1.0, 2.0, 0.0)
        ta = np.array([4.0, 6.0, 0.0])
        _, Ha = range_residual(tu, ta, 3.0).jacobians
        np.testing.assert_allclose(np.ravel(Ha), -(tu.translation - ta) / 5.0)

    def test_matches_finite_differences(self):
        rng = np.random.default_rng(4)
        for _ in range(30):
            tu = random_pose(rng)
            ta = tu.translation + rng.normal(scale=4, size=3)
            d = float(rng.uniform(0, 10))
            ev = range_residual(tu, ta, d)
            Jn = numeric_jacobian(lambda a, b: range_residual(a, b, d).residual, [tu, ta])
            np.testing.assert_allclose(stacked(ev.jacobians), Jn, atol=1e-6)

    def test_degenerate(self):
        with pytest.raises(DegenerateGeometryError):
            range_residual(Pose.from_translation(1, 1, 1), [1, 1, 1], 1.0)


class TestPrior:
    def test_zero(self):
        np.testing.assert_allclose(prior_residual(Pose.identity(), Pose.identity()).residual, 0.0)

    def test_translation(self):
        np.testing.assert_allclose(prior_residual(Pose.from_translation(1.0), Pose.identity()).residual,
                                   [0, 0, 0, 1, 0, 0], atol=1e-12)

    def test_identity_jacobian_at_zero(self):
        ref = random_pose(np.random.default_rng(5))
        ev = prior_residual(ref, ref)
        np.testing.assert_allclose(ev.jacobians[0], np.eye(6))
        Jn = numeric_jacobian(lambda a: prior_residual(a, ref).residual, ref)
        np.testing.assert_allclose(Jn, np.eye(6), atol=1e-6)


class TestRobust:
    w = FactorWeight.isotropic(1, 1.0, Cauchy(1.0))

    def test_zero_residual(self):
        assert apply_robust_weight(0.0, self.w) == 1.0

    def test_at_c(self):
        assert apply_robust_weight(1.0, self.w) == pytest.approx(0.5)

    def test_whitened(self):
        w = FactorWeight.isotropic(1, 100.0, Cauchy(1.0))  # sigma 0.1
        assert apply_robust_weight(0.1, w) == pytest.approx(0.5)

    def test_none_kernel(self):
        assert apply_robust_weight(5.0, FactorWeight.isotropic(1, 1.0)) == 1.0

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.floats(0.0, 1e3), min_size=2, max_size=20))
    def test_monotone_and_bounded(self, rs):
        ms = [apply_robust_weight(r, self.w) for r in sorted(rs)]
        assert all(0.0 < m <= 1.0 for m in ms)
        assert all(b <= a for a, b in zip(ms, ms[1:]))

    def test_cost_derivative_is_multiplier(self):
        # d/ds [c^2 log(1 + s/c^2)] = 1 / (1 + s/c^2)
        s, h = 2.3, 1e-6
        d = (robust_cost(np.array(s + h), 1.0) - robust_cost(np.array(s - h), 1.0)) / (2 * h)
        assert float(d) == pytest.approx(1.0 / (1.0 + s), rel=1e-8)


class TestWeights:
    def test_defaults(self):
        w = FactorWeights()
        np.testing.assert_allclose(np.diag(w.motion.information), [50, 50, 50, 25, 25, 25])
        assert w.scale.information[0, 0] == pytest.approx(400.0)
        assert w.ble_loop.information[0, 0] == pytest.approx(4.0)
        assert w.range.information[0, 0] == pytest.approx(100.0)
        assert w.range.robust_kernel.c == 1.0
        assert w.ble_loop.robust_kernel is None
        np.testing.assert_allclose(w.prior.information, 1e6 * np.eye(6))

    def test_from_config(self):
        w = FactorWeights.from_config({"range_sigma": 0.2, "robust": False, "loop_sigma": 1.0})
        assert w.range.information[0, 0] == pytest.approx(25.0)
        assert w.range.robust_kernel is None
        assert w.wifi_loop.information[0, 0] == pytest.approx(1.0)

    @pytest.mark.parametrize("info", [np.array([[1.0, 2.0], [0.0, 1.0]]), -np.eye(2), np.ones((2, 3))])
    def test_invalid_information(self, info):
        with pytest.raises(ValueError):
            FactorWeight(info)

    def test_invalid_cauchy(self):
        with pytest.raises(ValueError):
            Cauchy(0.0)


def test_descent_away_from_zero():
    from pedfuse.jacobian_check import FACTORS, _case, descends

    rng = np.random.default_rng(6)
    for name in FACTORS:
        for _ in range(10):
            f, xs, jac = _case(name, rng, zero=False)
            assert descends(f, xs, jac), name


def test_motion_small_perturbation_descent_direction():
    # first-order Jacobians still point downhill near a zero-residual configuration
    rng = np.random.default_rng(7)
    m = StepMeasurement(rotz(0.2), [1, 0, 0])
    t0 = random_pose(rng)
    t1 = compose(compose(t0, Pose(rotz(0.2), [0.8, 0, 0])), exp_map(rng.normal(scale=0.05, size=6)))
    ev = pdr_motion_residual(t0, t1, 0.8, m)
    J = stacked(ev.jacobians)
    g = J.T @ ev.residual
    Jn = numeric_jacobian(lambda a, b, s: pdr_motion_residual(a, b, s, m).residual, [t0, t1, 0.8])
    assert g @ (Jn.T @ ev.residual) > 0
