import numpy as np
import pytest

from descfields import geom
from descfields.geom import (
    Aabb,
    DegenerateCloudError,
    GeometryError,
    NormFrame,
    PointCloud,
    SE3Pose,
)


def random_pose(rng, box=0.5):
    bounds = Aabb(-box * np.ones(3), box * np.ones(3))
    return geom.random_se3(rng, bounds)


class TestSE3Pose:
    def test_invariants_rejected(self):
        with pytest.raises(GeometryError):
            SE3Pose(np.eye(3) * 2.0, np.zeros(3))
        with pytest.raises(GeometryError):
            SE3Pose(np.diag([1.0, 1.0, -1.0]), np.zeros(3))  # det = -1

    def test_compose_with_inverse_is_identity(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            t = random_pose(rng)
            ident = geom.se3_compose(t, t.inverse())
            assert np.abs(ident.rotation - np.eye(3)).max() < 1e-9
            assert np.abs(ident.translation).max() < 1e-9

    def test_identity_is_neutral(self):
        rng = np.random.default_rng(1)
        t = random_pose(rng)
        c = geom.se3_compose(SE3Pose.identity(), t)
        assert np.array_equal(c.rotation, t.rotation)
        assert np.array_equal(c.translation, t.translation)

    def test_compose_matches_sequential_application(self):
        # oracle: apply b then a directly to points
        rng = np.random.default_rng(2)
        for _ in range(10):
            a, b = random_pose(rng), random_pose(rng)
            pts = rng.normal(size=(50, 3))
            direct = a.apply(b.apply(pts))
            composed = geom.se3_compose(a, b).apply(pts)
            assert np.abs(direct - composed).max() < 1e-9


class TestSE3Apply:
    def test_axis_rotation(self):
        rz90 = SE3Pose(geom.quat_to_matrix([np.cos(np.pi / 4), 0, 0, np.sin(np.pi / 4)]), np.zeros(3))
        out = geom.se3_apply(rz90, PointCloud(np.array([[1.0, 0, 0], [0, 0, 1.0]])))
        assert np.abs(out.points[0] - [0, 1, 0]).max() < 1e-12
        assert np.abs(out.points[1] - [0, 0, 1]).max() < 1e-12

    def test_identity_bitwise(self):
        rng = np.random.default_rng(3)
        cloud = PointCloud(rng.normal(size=(30, 3)))
        out = geom.se3_apply(SE3Pose.identity(), cloud)
        assert np.array_equal(out.points, cloud.points)

    def test_isometry_distance_matrix(self):
        # oracle: full pairwise distance matrix before/after
        rng = np.random.default_rng(4)
        pts = rng.normal(size=(100, 3))
        d0 = np.linalg.norm(pts[:, None] - pts[None, :], axis=-1)
        for _ in range(5):
            t = random_pose(rng)
            moved = t.apply(pts)
            d1 = np.linalg.norm(moved[:, None] - moved[None, :], axis=-1)
            assert np.abs(d0 - d1).max() < 1e-9

    def test_normals_rotated_only(self):
        rng = np.random.default_rng(5)
        n = rng.normal(size=(10, 3))
        n /= np.linalg.norm(n, axis=1, keepdims=True)
        cloud = PointCloud(rng.normal(size=(10, 3)), n)
        t = random_pose(rng)
        out = geom.se3_apply(t, cloud)
        assert np.abs(np.linalg.norm(out.normals, axis=1) - 1).max() < 1e-9
        assert np.abs(out.normals - n @ t.rotation.T).max() < 1e-12


class TestRandomSE3:
    def test_degenerate_bounds_pin_translation(self):
        c = np.array([0.1, -0.2, 0.3])
        pose = geom.random_se3(np.random.default_rng(0), Aabb(c, c))
        assert np.array_equal(pose.translation, c)

    def test_mean_rotation_angle_uniform_so3(self):
        # Monte-Carlo estimate of the uniform-SO(3) mean angle (126.47 deg)
        rng = np.random.default_rng(123)
        bounds = Aabb(-np.ones(3), np.ones(3))
        angles = [geom.rotation_angle_deg(geom.random_se3(rng, bounds).rotation) for _ in range(10_000)]
        assert abs(np.mean(angles) - 126.5) < 2.0

    def test_seed_determinism(self):
        bounds = Aabb(-np.ones(3), np.ones(3))
        a = geom.random_se3(np.random.default_rng(7), bounds)
        b = geom.random_se3(np.random.default_rng(7), bounds)
        assert np.array_equal(a.rotation, b.rotation)
        assert np.array_equal(a.translation, b.translation)


class TestNormalize:
    def test_centered_cloud_unchanged(self):
        pts = np.array([[1.0, 0, 0], [-1.0, 0, 0], [0, 1.0, 0], [0, -1.0, 0]])
        normed, frame = geom.normalize_cloud(PointCloud(pts), scale=1.0)
        assert np.abs(normed.points - pts).max() < 1e-12
        assert np.abs(frame.centroid_shift).max() < 1e-12

    def test_translation_canonicalization(self):
        rng = np.random.default_rng(8)
        pts = rng.normal(size=(200, 3))
        base, _ = geom.normalize_cloud(PointCloud(pts), scale=2.5)
        for _ in range(5):
            t = rng.uniform(-10, 10, size=3)
            shifted, _ = geom.normalize_cloud(PointCloud(pts + t), scale=2.5)
            assert np.abs(shifted.points - base.points).max() < 1e-7

    def test_round_trip(self):
        rng = np.random.default_rng(9)
        cloud = PointCloud(rng.normal(size=(50, 3)) + 5.0)
        normed, frame = geom.normalize_cloud(cloud, scale=2.5)
        back = geom.denormalize_cloud(normed, frame)
        assert np.abs(back.points - cloud.points).max() < 1e-7

    def test_degenerate_rejected(self):
        with pytest.raises(DegenerateCloudError):
            geom.normalize_cloud(PointCloud(np.zeros((5, 3))), scale=1.0)

    def test_centroid_at_origin(self):
        rng = np.random.default_rng(10)
        cloud = PointCloud(rng.uniform(3, 9, size=(64, 3)))
        normed, _ = geom.normalize_cloud(cloud, scale=2.5)
        assert np.abs(normed.points.mean(axis=0)).max() < 1e-7


class TestPoseNormalization:
    def test_identity_frame_no_op(self):
        rng = np.random.default_rng(11)
        pose = random_pose(rng)
        frame = NormFrame(np.zeros(3), 1.0)
        out = geom.denormalize_pose(pose, frame)
        assert np.abs(out.rotation - pose.rotation).max() < 1e-12
        assert np.abs(out.translation - pose.translation).max() < 1e-12

    def test_round_trip_pick_pose(self):
        rng = np.random.default_rng(12)
        frame = NormFrame(rng.normal(size=3), 2.5)
        pose = random_pose(rng)
        back = geom.denormalize_pose(geom.normalize_pose(pose, frame), frame)
        assert np.abs(back.rotation - pose.rotation).max() < 1e-9
        assert np.abs(back.translation - pose.translation).max() < 1e-7

    def test_pure_translation_frame_closed_form(self):
        frame = NormFrame(np.array([1.0, 2.0, 3.0]), 4.0)
        pose = SE3Pose(np.eye(3), np.array([0.4, 0.8, -1.2]))
        out = geom.denormalize_pose(pose, frame)
        expect = pose.translation / frame.scale + frame.centroid_shift
        assert np.abs(out.translation - expect).max() < 1e-12

    def test_frame_origin_maps_like_a_point(self):
        rng = np.random.default_rng(13)
        frame = NormFrame(rng.normal(size=3), 2.5)
        pose = random_pose(rng)
        normed = geom.normalize_pose(pose, frame)
        assert np.abs(normed.translation - frame.to_cube(pose.translation)).max() < 1e-12
        assert np.array_equal(normed.rotation, pose.rotation)


class TestLpc1(object):
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(14)
        n = rng.normal(size=(33, 3))
        n /= np.linalg.norm(n, axis=1, keepdims=True)
        cloud = PointCloud(rng.normal(size=(33, 3)).astype(np.float32).astype(np.float64), n)
        path = tmp_path / "c.lpc1"
        geom.write_lpc1(path, cloud)
        back = geom.read_lpc1(path)
        assert np.array_equal(back.points, cloud.points)
        assert np.abs(back.normals - cloud.normals).max() < 1e-6

    def test_no_normals_flag(self, tmp_path):
        cloud = PointCloud(np.array([[1.0, 2.0, 3.0]]))
        path = tmp_path / "c.lpc1"
        geom.write_lpc1(path, cloud)
        back = geom.read_lpc1(path)
        assert back.normals is None
        assert back.points.shape == (1, 3)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "junk.lpc1"
        path.write_bytes(b"NOPE" + b"\x00" * 16)
        with pytest.raises(GeometryError):
            geom.read_lpc1(path)


class TestQuaternions:
    def test_round_trip(self):
        rng = np.random.default_rng(15)
        for _ in range(50):
            q = rng.normal(size=4)
            q /= np.linalg.norm(q)
            r = geom.quat_to_matrix(q)
            q2 = geom.matrix_to_quat(r)
            # q and -q are the same rotation
            assert min(np.abs(q2 - q).max(), np.abs(q2 + q).max()) < 1e-9

    def test_matrix_is_rotation(self):
        rng = np.random.default_rng(16)
        for _ in range(20):
            r = geom.quat_to_matrix(rng.normal(size=4))
            SE3Pose(r, np.zeros(3))  # validates orthonormality + det
