import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from scipy.spatial.transform import Rotation

from probfusion.errors import FormatError, NonPositiveDepth, NonPositiveInverseDepth
from probfusion.geometry import (
    Intrinsics,
    Pose,
    backproject,
    flow_residual_jacobians,
    look_at,
    project,
    read_trajectory,
    se3_exp,
    se3_log,
    write_trajectory,
)

twists = arrays(np.float64, 6, elements=st.floats(-1.0, 1.0))


def random_pose(rng, scale=1.0):
    return Pose.from_rt(Rotation.random(random_state=rng.integers(1 << 31)).as_matrix(), rng.normal(size=3) * scale)


class TestExp:
    def test_zero_twist_is_identity(self):
        T = se3_exp(np.zeros(6))
        np.testing.assert_array_equal(T.matrix(), np.eye(4))

    def test_pure_translation(self):
        T = se3_exp([0, 0, 0, 1, 2, 3])
        np.testing.assert_allclose(T.rotation, np.eye(3), atol=1e-15)
        np.testing.assert_allclose(T.translation, [1, 2, 3])

    def test_quarter_turn_about_z(self):
        T = se3_exp([0, 0, np.pi / 2, 0, 0, 0])
        np.testing.assert_allclose(T.act(np.array([1.0, 0, 0])), [0, 1, 0], atol=1e-12)

    def test_small_twist_first_order(self):
        xi = 1e-7 * np.array([1, -2, 3, 4, -5, 6])
        T = se3_exp(xi)
        M = np.eye(4)
        M[:3, :3] += np.array([[0, -xi[2], xi[1]], [xi[2], 0, -xi[0]], [-xi[1], xi[0], 0]])
        M[:3, 3] = xi[3:]
        np.testing.assert_allclose(T.matrix(), M, atol=1e-13)

    @given(twists)
    @settings(max_examples=100, deadline=None)
    def test_log_inverts_exp(self, xi):
        np.testing.assert_allclose(se3_log(se3_exp(xi)), xi, atol=1e-9)

    def test_matches_matrix_exponential(self, rng):
        from scipy.linalg import expm

        xi = rng.normal(size=6)
        w, v = xi[:3], xi[3:]
        A = np.zeros((4, 4))
        A[:3, :3] = [[0, -w[2], w[1]], [w[2], 0, -w[0]], [-w[1], w[0], 0]]
        A[:3, 3] = v
        np.testing.assert_allclose(se3_exp(xi).matrix(), expm(A), atol=1e-12)


class TestPose:
    def test_orthonormal(self, rng):
        for _ in range(20):
            R = random_pose(rng).rotation
            np.testing.assert_allclose(R.T @ R, np.eye(3), atol=1e-9)
            assert abs(np.linalg.det(R) - 1) < 1e-9

    def test_compose_inverse(self, rng):
        T = random_pose(rng, 3.0)
        np.testing.assert_allclose((T @ T.inverse()).matrix(), np.eye(4), atol=1e-9)

    def test_compose_matches_matrices(self, rng):
        A, B = random_pose(rng), random_pose(rng)
        np.testing.assert_allclose((A @ B).matrix(), A.matrix() @ B.matrix(), atol=1e-12)

    def test_canonical_quaternion(self):
        assert Pose([0, 0, 0, -1]).quat[3] == 1.0

    def test_rejects_zero_quaternion(self):
        with pytest.raises(ValueError):
            Pose([0, 0, 0, 0])

    def test_look_at_points_z_at_target(self):
        T = look_at([2, 0, 1], [0, 0, 1])
        np.testing.assert_allclose(T.rotation[:, 2], [-1, 0, 0], atol=1e-12)
        # image y points down in the world
        assert T.rotation[2, 1] < 0


class TestCamera:
    def test_optical_axis(self):
        K = Intrinsics(50, 50, 100, 100, 200, 200)
        np.testing.assert_allclose(project(np.array([0, 0, 2.0]), K), [100, 100])

    def test_similar_triangles(self):
        K = Intrinsics(50, 50, 100, 100, 200, 200)
        assert project(np.array([1.0, 0, 1]), K)[0] == pytest.approx(150)

    @pytest.mark.parametrize("z", [0.0, -1.0, 1e-9])
    def test_project_rejects_nonpositive_depth(self, z):
        K = Intrinsics(50, 50, 100, 100, 200, 200)
        with pytest.raises(NonPositiveDepth):
            project(np.array([0, 0, z]), K)

    def test_backproject_roundtrip(self, rng):
        K = Intrinsics(40, 45, 30, 20, 64, 48)
        px = rng.uniform(0, 40, (50, 2))
        d = rng.uniform(0.2, 2, 50)
        np.testing.assert_allclose(project(backproject(px, d, K), K), px, atol=1e-10)
        np.testing.assert_allclose(backproject(px, d, K)[:, 2], 1 / d)

    def test_backproject_rejects_nonpositive(self):
        K = Intrinsics(40, 45, 30, 20, 64, 48)
        with pytest.raises(NonPositiveInverseDepth):
            backproject(np.array([1.0, 2.0]), 0.0, K)

    @pytest.mark.parametrize("bad", [dict(fx=0), dict(cx=0), dict(cy=48)])
    def test_invalid_intrinsics(self, bad):
        kw = dict(fx=40, fy=45, cx=30, cy=20, width=64, height=48) | bad
        with pytest.raises(ValueError):
            Intrinsics(**kw)

    def test_scaled_keeps_ray_through_pixel_block_center(self):
        K = Intrinsics.from_fov(69, 44)
        Kh = K.scaled(8)
        assert (Kh.width, Kh.height) == (552, 352)
        # the center of low-res pixel (u, v) is high-res coordinate 8u + 3.5
        np.testing.assert_allclose(Kh.rays(np.array([8 * 10 + 3.5, 8 * 7 + 3.5])), K.rays(np.array([10.0, 7.0])))


class TestJacobians:
    def test_against_central_differences(self, rng):
        K = Intrinsics(40, 42, 31.5, 23.5, 64, 48)
        n = 100
        Ri, Rj, ti, tj = [], [], [], []
        for _ in range(n):
            a = random_pose(rng, 0.1)
            Ri.append(a.rotation)
            ti.append(a.translation)
            b = a.retract(rng.normal(size=6) * 0.05)
            Rj.append(b.rotation)
            tj.append(b.translation)
        Ri, Rj, ti, tj = map(np.array, (Ri, Rj, ti, tj))
        px = rng.uniform(5, 55, (n, 2))
        d = rng.uniform(0.3, 1.0, n)
        _, J_i, J_j, J_d, _ = flow_residual_jacobians(Ri, ti, Rj, tj, px, d, K)

        def f(Ri_, ti_, Rj_, tj_, d_):
            return flow_residual_jacobians(Ri_, ti_, Rj_, tj_, px, d_, K)[0]

        h = 1e-6
        for k in range(6):
            e = np.zeros(6)
            e[k] = h

            def moved(R, t, step):
                P = [Pose.from_rt(R[m], t[m]).retract(step) for m in range(n)]
                return np.array([p.rotation for p in P]), np.array([p.translation for p in P])

            Rp, tp = moved(Ri, ti, e)
            Rm, tm = moved(Ri, ti, -e)
            num_i = (f(Rp, tp, Rj, tj, d) - f(Rm, tm, Rj, tj, d)) / (2 * h)
            Rp, tp = moved(Rj, tj, e)
            Rm, tm = moved(Rj, tj, -e)
            num_j = (f(Ri, ti, Rp, tp, d) - f(Ri, ti, Rm, tm, d)) / (2 * h)
            np.testing.assert_allclose(J_i[:, :, k], num_i, rtol=1e-5, atol=1e-5)
            np.testing.assert_allclose(J_j[:, :, k], num_j, rtol=1e-5, atol=1e-5)
        num_d = (f(Ri, ti, Rj, tj, d + h) - f(Ri, ti, Rj, tj, d - h)) / (2 * h)
        np.testing.assert_allclose(J_d, num_d, rtol=1e-5, atol=1e-5)


class TestTrajectoryFile:
    def test_roundtrip_exact(self, tmp_path, rng):
        poses = [random_pose(rng) for _ in range(5)]
        write_trajectory(tmp_path / "t.txt", poses)
        stamps, back = read_trajectory(tmp_path / "t.txt")
        assert stamps == [0, 1, 2, 3, 4]
        for a, b in zip(poses, back):
            np.testing.assert_array_equal(a.quat, b.quat)
            np.testing.assert_array_equal(a.translation, b.translation)

    def test_bad_line_reports_line_number(self, tmp_path):
        (tmp_path / "t.txt").write_text("0 0 0 0 0 0 0 1\n1 2 3\n")
        with pytest.raises(FormatError, match=":2:"):
            read_trajectory(tmp_path / "t.txt")
