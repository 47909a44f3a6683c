import numpy as np
import pytest

from femloc.errors import DegenerateGeometry, InvalidArgument
from femloc.geometry import (
    CameraIntrinsics,
    Pose,
    Twist,
    backproject,
    backproject_grid,
    backproject_pixels,
    exp_map,
    format_pose_line,
    log_map,
    parse_pose_line,
    project,
    project_points,
    triangulate,
)

from conftest import random_pose, random_twist

K = CameraIntrinsics(fx=100.0, fy=100.0, cx=50.0, cy=50.0, width=100, height=100)


class TestProject:
    def test_optical_axis_point_hits_principal_point(self):
        p = project(np.array([0.0, 0.0, 2.0]), K, Pose.identity())
        assert p is not None
        assert p.u == 50.0 and p.v == 50.0 and p.d == 2.0

    def test_pinhole_formula(self):
        # u = fx*x/z + cx, v = fy*y/z + cy, evaluated by hand.
        p = project(np.array([0.5, -0.3, 2.0]), K, Pose.identity())
        assert p == pytest.approx((75.0, 35.0, 2.0))

    def test_point_behind_camera_is_none(self):
        assert project(np.array([0.0, 0.0, -1.0]), K, Pose.identity()) is None

    def test_right_boundary_is_out_of_frame(self):
        # u = 100 falls on the excluded edge of [0, width).
        assert project(np.array([1.0, 0.0, 2.0]), K, Pose.identity()) is None
        assert project(np.array([0.99, 0.0, 2.0]), K, Pose.identity()) is not None

    def test_pose_is_applied_before_projection(self):
        pose = Pose(np.eye(3), np.array([0.0, 0.0, 1.0]))
        p = project(np.array([0.0, 0.0, 2.0]), K, pose)
        assert p is not None and p.d == 3.0


class TestBackproject:
    def test_principal_ray(self):
        q = backproject((50.0, 50.0), 3.0, K, Pose.identity())
        np.testing.assert_allclose(q, [0.0, 0.0, 3.0], atol=1e-12)

    def test_inverse_of_pinhole_example(self):
        q = backproject((100.0, 50.0), 2.0, K, Pose.identity())
        np.testing.assert_allclose(q, [1.0, 0.0, 2.0], atol=1e-12)

    def test_nonpositive_depth_rejected(self):
        with pytest.raises(InvalidArgument):
            backproject((50.0, 50.0), 0.0, K, Pose.identity())

    def test_roundtrip_random_in_frustum(self, rng):
        # 1e4 random (pixel, depth) samples through a random pose; max error < 1e-9.
        pose = random_pose(rng)
        uv = np.stack(
            [rng.uniform(0, K.width - 1e-6, 10_000), rng.uniform(0, K.height - 1e-6, 10_000)],
            axis=1,
        )
        d = rng.uniform(0.1, 50.0, 10_000)
        pts = backproject_pixels(uv, d, K, pose)
        uvd, valid = project_points(pts, K, pose)
        assert valid.all()
        assert np.max(np.abs(uvd[:, :2] - uv)) < 1e-9
        assert np.max(np.abs(uvd[:, 2] - d)) < 1e-9

    def test_grid_matches_per_pixel(self, rng):
        pose = random_pose(rng)
        small = CameraIntrinsics(50.0, 60.0, 20.0, 15.0, 40, 30)
        depth = rng.uniform(0.5, 5.0, size=(30, 40))
        depth[3, 7] = -1.0
        depth[5, 5] = np.inf
        pts, valid = backproject_grid(depth, small, pose)
        assert not valid[3, 7] and not valid[5, 5]
        q = backproject((7.0, 3.0), 2.5, small, pose)
        depth2 = depth.copy()
        depth2[3, 7] = 2.5
        pts2, _ = backproject_grid(depth2, small, pose)
        np.testing.assert_allclose(pts2[3, 7], q, atol=1e-12)


class TestPoseAlgebra:
    def test_compose_inverse_is_identity(self, rng):
        for _ in range(100):
            p = random_pose(rng)
            ident = p.compose(p.inverse())
            assert ident.almost_equal(Pose.identity(), tol=1e-9)
            ident2 = p.inverse().compose(p)
            assert ident2.almost_equal(Pose.identity(), tol=1e-9)

    def test_compose_associative(self, rng):
        for _ in range(100):
            a, b, c = (random_pose(rng) for _ in range(3))
            lhs = a.compose(b).compose(c)
            rhs = a.compose(b.compose(c))
            assert lhs.almost_equal(rhs, tol=1e-9)

    def test_rotation_validation(self):
        with pytest.raises(InvalidArgument):
            Pose(np.eye(3) * 1.1, np.zeros(3))
        with pytest.raises(InvalidArgument):
            Pose(np.diag([1.0, 1.0, -1.0]), np.zeros(3))  # det = -1

    def test_quaternion_roundtrip(self, rng):
        for _ in range(50):
            p = random_pose(rng)
            q = p.to_quaternion()
            assert q[0] >= 0
            p2 = Pose.from_quaternion(q, p.translation)
            assert p2.almost_equal(p, tol=1e-12)

    def test_transform_matches_matrix(self, rng):
        p = random_pose(rng)
        x = rng.normal(size=3)
        hom = p.matrix() @ np.append(x, 1.0)
        np.testing.assert_allclose(p.transform(x), hom[:3], atol=1e-12)


class TestExpLog:
    def test_roundtrip_random_twists(self, rng):
        # 1e4 random twists with rotation angle in (0, pi - 0.1).
        worst = 0.0
        for _ in range(10_000):
            tw = random_twist(rng)
            back = log_map(exp_map(tw))
            worst = max(worst, np.max(np.abs(back.as_vector() - tw.as_vector())))
        assert worst < 1e-9

    def test_zero_twist_is_identity(self):
        p = exp_map(Twist.zero())
        assert np.array_equal(p.rotation, np.eye(3))
        assert np.array_equal(p.translation, np.zeros(3))

    def test_small_angle_taylor_branch(self):
        tw = Twist(np.zeros(3), np.array([1e-9, -2e-9, 3e-10]))
        back = log_map(exp_map(tw))
        assert np.max(np.abs(back.as_vector() - tw.as_vector())) < 1e-18

    def test_log_of_pose_roundtrips(self, rng):
        for _ in range(1000):
            p = random_pose(rng)
            assert exp_map(log_map(p)).almost_equal(p, tol=1e-9)


class TestTriangulate:
    def test_recovers_synthetic_point(self, rng):
        for _ in range(50):
            p1pose = random_pose(rng, trans_scale=1.0)
            p2pose = random_pose(rng, trans_scale=1.0)
            X = rng.uniform(-1, 1, size=3)
            # Keep the point in front of both cameras.
            if p1pose.transform(X)[2] <= 0.1 or p2pose.transform(X)[2] <= 0.1:
                continue
            pix1 = _project_unbounded(X, K, p1pose)
            pix2 = _project_unbounded(X, K, p2pose)
            got = triangulate(pix1, pix2, K, p1pose, p2pose)
            np.testing.assert_allclose(got, X, atol=1e-6)

    def test_identical_poses_degenerate(self):
        pose = Pose.identity()
        with pytest.raises(DegenerateGeometry):
            triangulate((50.0, 50.0), (60.0, 50.0), K, pose, pose)

    def test_far_point_recovered_or_flagged(self):
        # Point at z = 1e6 * baseline for a 1 m baseline.
        pose1 = Pose.identity()
        pose2 = Pose(np.eye(3), np.array([-1.0, 0.0, 0.0]))
        X = np.array([0.2, 0.1, 1e6])
        pix1 = _project_unbounded(X, K, pose1)
        pix2 = _project_unbounded(X, K, pose2)
        try:
            got = triangulate(pix1, pix2, K, pose1, pose2)
            assert abs(got[2] - X[2]) / X[2] < 0.01
        except DegenerateGeometry:
            pass


class TestPoseLineFormat:
    def test_identity_line(self):
        p = parse_pose_line("1 0 0 0 0 1 0 0 0 0 1 0")
        assert p.almost_equal(Pose.identity(), tol=1e-12)

    def test_translation_is_camera_to_world(self):
        # Camera sits at (1, 2, 3) in the world; [R|t] stores camera->world.
        p = parse_pose_line("1 0 0 1 0 1 0 2 0 0 1 3")
        np.testing.assert_allclose(p.center(), [1.0, 2.0, 3.0], atol=1e-12)
        np.testing.assert_allclose(p.translation, [-1.0, -2.0, -3.0], atol=1e-12)

    def test_wrong_field_count_rejected(self):
        with pytest.raises(InvalidArgument):
            parse_pose_line("1 0 0 0 0 1 0 0 0 0 1")

    def test_non_numeric_rejected(self):
        with pytest.raises(InvalidArgument):
            parse_pose_line("1 0 0 0 0 1 0 x 0 0 1 0")

    def test_roundtrip(self, rng):
        for _ in range(100):
            p = random_pose(rng)
            p2 = parse_pose_line(format_pose_line(p))
            assert p2.almost_equal(p, tol=1e-9)


def _project_unbounded(X, K, pose):
    """Pinhole projection without the image-bounds check (test helper)."""
    cam = pose.transform(X)
    return (K.fx * cam[0] / cam[2] + K.cx, K.fy * cam[1] / cam[2] + K.cy)
