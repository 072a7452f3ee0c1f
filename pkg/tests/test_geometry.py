import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from lamp.geometry import (
    AngleNearPi,
    Pose3,
    compose,
    geodesic_distances,
    inverse,
    random_pose,
    rotation_angle,
    se3_adjoint,
    se3_right_jacobian_inv,
    so3_exp,
    yaw_pose,
)


def _mat_oracle(a: Pose3, b: Pose3) -> np.ndarray:
    # Independent 4x4 homogeneous matrix product.
    return a.matrix() @ b.matrix()


def poses(max_angle=3.0):
    return st.integers(min_value=0, max_value=2**31 - 1).map(
        lambda seed: random_pose(np.random.default_rng(seed), max_angle=max_angle)
    )


class TestCompose:
    def test_identity(self):
        p = yaw_pose(0.3, (1.0, 2.0, 3.0))
        q = compose(Pose3.identity(), p)
        np.testing.assert_allclose(q.matrix(), p.matrix(), atol=1e-12)

    def test_inverse_gives_identity(self):
        p = yaw_pose(1.1, (0.5, -2.0, 0.7))
        q = compose(p, inverse(p))
        np.testing.assert_allclose(q.matrix(), np.eye(4), atol=1e-9)

    def test_quarter_turns(self):
        # Rz(90)+t(1,0,0) twice -> Rz(180)+t(1,1,0); verified against the
        # matrix-product oracle and the hand-computed value.
        p = yaw_pose(np.pi / 2, (1.0, 0.0, 0.0))
        got = compose(p, p)
        np.testing.assert_allclose(got.matrix(), _mat_oracle(p, p), atol=1e-12)
        expect = yaw_pose(np.pi, (1.0, 1.0, 0.0))
        np.testing.assert_allclose(got.matrix(), expect.matrix(), atol=1e-12)

    @settings(max_examples=100, deadline=None)
    @given(poses(), poses(), poses())
    def test_associative(self, a, b, c):
        left = compose(compose(a, b), c)
        right = compose(a, compose(b, c))
        np.testing.assert_allclose(left.matrix(), right.matrix(), atol=1e-9)

    def test_matches_matrix_oracle(self):
        rng = np.random.default_rng(7)
        for _ in range(50):
            a, b = random_pose(rng), random_pose(rng)
            np.testing.assert_allclose(compose(a, b).matrix(), _mat_oracle(a, b), atol=1e-12)


class TestInverse:
    def test_identity(self):
        np.testing.assert_allclose(inverse(Pose3.identity()).matrix(), np.eye(4), atol=1e-15)

    def test_pure_translation(self):
        p = Pose3(np.eye(3), (1.0, -2.0, 3.0))
        np.testing.assert_allclose(inverse(p).translation, [-1.0, 2.0, -3.0], atol=1e-15)

    def test_quarter_turn(self):
        # inverse(Rz(90)+t(1,0,0)) -> Rz(-90)+t(0,1,0), per the matrix-inverse
        # oracle: -Rz(-90) @ (1,0,0) = (0,+1,0).
        p = yaw_pose(np.pi / 2, (1.0, 0.0, 0.0))
        got = inverse(p)
        np.testing.assert_allclose(got.matrix(), np.linalg.inv(p.matrix()), atol=1e-12)
        expect = yaw_pose(-np.pi / 2, (0.0, 1.0, 0.0))
        np.testing.assert_allclose(got.matrix(), expect.matrix(), atol=1e-12)


class TestExpLog:
    def test_log_identity(self):
        np.testing.assert_allclose(Pose3.identity().log(), np.zeros(6), atol=1e-15)

    def test_exp_pure_rotation(self):
        theta = 0.7
        p = Pose3.exp([0.0, 0.0, theta, 0.0, 0.0, 0.0])
        np.testing.assert_allclose(p.matrix(), yaw_pose(theta).matrix(), atol=1e-12)
        np.testing.assert_allclose(p.translation, np.zeros(3), atol=1e-15)

    def test_round_trip_random(self):
        rng = np.random.default_rng(11)
        for _ in range(1000):
            p = random_pose(rng, max_angle=3.0)
            q = Pose3.exp(p.log())
            np.testing.assert_allclose(q.matrix(), p.matrix(), atol=1e-9)

    def test_round_trip_near_pi(self):
        p = random_pose(np.random.default_rng(3), max_angle=0.0)
        p = Pose3(so3_exp(np.array([1.0, 0.0, 0.0]) * (np.pi - 0.01)), p.translation)
        np.testing.assert_allclose(Pose3.exp(p.log()).matrix(), p.matrix(), atol=1e-9)

    def test_log_near_pi_raises(self):
        p = Pose3(so3_exp(np.array([0.0, 0.0, np.pi - 1e-8])), np.zeros(3))
        with pytest.raises(AngleNearPi):
            p.log()

    def test_small_angle(self):
        xi = np.array([1e-10, -2e-10, 1e-10, 0.5, 0.2, -0.1])
        np.testing.assert_allclose(Pose3.exp(xi).log(), xi, atol=1e-15)


class TestGeodesic:
    def test_same_pose(self):
        p = yaw_pose(0.4, (1.0, 0.0, 2.0))
        assert geodesic_distances(p, p) == (0.0, 0.0)

    def test_rotation_only(self):
        rot, trans = geodesic_distances(Pose3.identity(), yaw_pose(0.05))
        assert abs(rot - 0.05) < 1e-12
        assert trans == 0.0

    def test_translation_pythagorean(self):
        rot, trans = geodesic_distances(Pose3.identity(), Pose3(np.eye(3), (0.06, 0.08, 0.0)))
        assert rot == 0.0
        assert abs(trans - 0.1) < 1e-15


class TestNumericalHygiene:
    def test_orthonormality_over_many_compositions(self):
        # Long-lived accumulator: project every 64 steps, as the odometry
        # integrator does.  One million steps must not degrade the rotation.
        rng = np.random.default_rng(5)
        steps = [random_pose(rng, max_angle=0.2, max_trans=0.5) for _ in range(257)]
        acc = Pose3.identity()
        for i in range(1_000_000):
            acc = acc.compose(steps[i % 257])
            if (i + 1) % 64 == 0:
                acc = acc.orthonormalized()
        r = acc.rotation
        assert np.max(np.abs(r @ r.T - np.eye(3))) < 1e-9
        assert abs(np.linalg.det(r) - 1.0) < 1e-9

    def test_adjoint_consistency(self):
        # Ad_T maps tangent vectors: T exp(xi) T^-1 = exp(Ad_T xi).
        rng = np.random.default_rng(9)
        for _ in range(20):
            t = random_pose(rng)
            xi = rng.normal(scale=0.3, size=6)
            left = t.compose(Pose3.exp(xi)).compose(t.inverse())
            right = Pose3.exp(se3_adjoint(t) @ xi)
            np.testing.assert_allclose(left.matrix(), right.matrix(), atol=1e-9)

    def test_right_jacobian_inverse_matches_finite_differences(self):
        rng = np.random.default_rng(13)
        h = 1e-6
        for _ in range(25):
            base = random_pose(rng, max_angle=2.5)
            xi = base.log()
            jinv = se3_right_jacobian_inv(xi)
            num = np.zeros((6, 6))
            for k in range(6):
                d = np.zeros(6)
                d[k] = h
                plus = base.compose(Pose3.exp(d)).log()
                minus = base.compose(Pose3.exp(-d)).log()
                num[:, k] = (plus - minus) / (2 * h)
            np.testing.assert_allclose(jinv, num, atol=1e-5)


def test_quat_round_trip():
    rng = np.random.default_rng(21)
    for _ in range(50):
        p = random_pose(rng)
        q = Pose3.from_quat(p.quat(), p.translation)
        np.testing.assert_allclose(q.matrix(), p.matrix(), atol=1e-12)
