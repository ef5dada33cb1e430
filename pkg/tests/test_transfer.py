import numpy as np
import pytest

from descfields import geom, shapes, transfer
from descfields.field import FieldConfig, init_weights
from descfields.geom import Aabb, SE3Pose
from descfields.pose import PoseSolveConfig, generate_query_points
from descfields.transfer import (
    Demonstration,
    TransferError,
    encode_demo_bundle,
    load_bundle,
    load_demo,
    record_demo,
    save_bundle,
    save_demo,
)

SMALL = FieldConfig(point_feat_dim=8, volume_channels=16, conv_layers=2,
                    decoder_hidden_width=16, decoder_hidden_layers=2)


@pytest.fixture(scope="module")
def weights():
    return init_weights(SMALL, seed=0)


@pytest.fixture(scope="module")
def query_sets():
    return (generate_query_points("gripper_contact", density=6),
            generate_query_points("surface_volume", density=8))


def make_demos(n, seed=0, cls="mug", pose_mode="upright"):
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n):
        inst = shapes.sample_instance(cls, cls == "mug", pose_mode, rng)
        out.append((inst, record_demo(inst, "rim_pick_place", rng, n_surface=700)))
    return out


class TestRecordDemo:
    def test_ten_upright_mugs(self):
        demos = make_demos(10, seed=1)
        assert len(demos) == 10
        for inst, d in demos:
            assert d.cloud.normals is not None
            assert len(d.cloud) > 200
            SE3Pose(d.pick_pose.rotation, d.pick_pose.translation)

    def test_pick_pose_is_ground_truth_frame(self):
        (inst, demo), = make_demos(1, seed=2)
        expect = shapes.ground_truth_frame(inst, "rim_grasp")
        assert np.abs(demo.pick_pose.as_matrix() - expect.as_matrix()).max() < 1e-12

    def test_covariance_under_instance_transform(self):
        rng = np.random.default_rng(3)
        spec = shapes.sample_spec("mug", True, rng)
        base = shapes.ShapeInstance(spec, SE3Pose.identity(), 1.0)
        t = geom.random_se3(np.random.default_rng(4), Aabb(-np.ones(3) * 0.1, np.ones(3) * 0.1))
        moved = shapes.ShapeInstance(spec, t, 1.0)
        d0 = record_demo(base, "rim_pick_place", np.random.default_rng(5), n_surface=400)
        d1 = record_demo(moved, "rim_pick_place", np.random.default_rng(5), n_surface=400)
        expect = geom.se3_compose(t, d0.pick_pose)
        assert np.abs(d1.pick_pose.as_matrix() - expect.as_matrix()).max() < 1e-9

    def test_incompatible_task(self):
        rng = np.random.default_rng(6)
        inst = shapes.sample_instance("bowl", False, "upright", rng)
        with pytest.raises(TransferError):
            record_demo(inst, "handle_pick_place", rng)

    def test_place_pose_fixture_relative(self):
        (inst, demo), = make_demos(1, seed=7)
        virtual = geom.se3_compose(transfer.DEFAULT_FIXTURE, demo.place_pose)
        expect = shapes.ground_truth_frame(inst, "upright_place")
        assert np.abs(virtual.as_matrix() - expect.as_matrix()).max() < 1e-9


class TestBundle:
    def test_single_demo_equals_its_descriptor(self, weights, query_sets):
        qp, qpl = query_sets
        (inst, demo), = make_demos(1, seed=8)
        bundle = encode_demo_bundle(weights, [demo], qp, qpl)
        from descfields.field import encode, pose_descriptor

        vol = encode(weights, demo.cloud)
        expect = pose_descriptor(weights, vol, demo.pick_pose, qp.points)
        assert np.array_equal(bundle.z_pick_mean, expect)
        assert bundle.demo_count == 1

    def test_identical_demos_mean_equals_single(self, weights, query_sets):
        qp, qpl = query_sets
        (inst, demo), = make_demos(1, seed=9)
        b1 = encode_demo_bundle(weights, [demo], qp, qpl)
        b3 = encode_demo_bundle(weights, [demo, demo, demo], qp, qpl)
        assert np.abs(b1.z_pick_mean - b3.z_pick_mean).max() < 1e-7

    def test_mean_matches_explicit_sum(self, weights, query_sets):
        qp, qpl = query_sets
        demos = [d for _, d in make_demos(3, seed=10)]
        bundle = encode_demo_bundle(weights, demos, qp, qpl)
        from descfields.field import encode, pose_descriptor

        acc = 0.0
        for d in demos:
            vol = encode(weights, d.cloud)
            acc = acc + pose_descriptor(weights, vol, d.pick_pose, qp.points)
        assert np.abs(bundle.z_pick_mean - acc / 3).max() < 1e-7

    def test_permutation_invariant(self, weights, query_sets):
        qp, qpl = query_sets
        demos = [d for _, d in make_demos(3, seed=11)]
        a = encode_demo_bundle(weights, demos, qp, qpl)
        b = encode_demo_bundle(weights, demos[::-1], qp, qpl)
        assert np.abs(a.z_pick_mean - b.z_pick_mean).max() < 1e-7
        assert np.abs(a.z_place_mean - b.z_place_mean).max() < 1e-7

    def test_offending_demo_identified(self, weights, query_sets):
        qp, qpl = query_sets
        demos = [d for _, d in make_demos(2, seed=12)]
        # corrupt the second demo: pick pose far outside the cube
        bad = Demonstration(demos[1].cloud,
                            SE3Pose(np.eye(3), demos[1].pick_pose.translation + 5.0),
                            demos[1].place_pose, "bad_demo")
        with pytest.raises(TransferError, match="demo 1"):
            encode_demo_bundle(weights, [demos[0], bad], qp, qpl)


class TestTransferRun:
    def test_place_only_task(self, weights, query_sets):
        qp, qpl = query_sets
        demos = [d for _, d in make_demos(2, seed=13)]
        bundle = encode_demo_bundle(weights, demos, qp, qpl)
        cfg = PoseSolveConfig(n_starts=2, steps_per_start=10)
        res = transfer.transfer(weights, bundle, demos[0].cloud, cfg,
                                np.random.default_rng(0), tasks=("place",))
        assert res.pick is None
        assert res.place is not None and res.place.success
        assert "place" in res.timing

    def test_fingerprint_mismatch_rejected(self, weights, query_sets):
        qp, qpl = query_sets
        demos = [d for _, d in make_demos(1, seed=14)]
        bundle = encode_demo_bundle(weights, demos, qp, qpl, fingerprint="aaa")
        with pytest.raises(TransferError):
            transfer.transfer(weights, bundle, demos[0].cloud,
                              PoseSolveConfig(n_starts=1, steps_per_start=5),
                              np.random.default_rng(0), fingerprint="bbb")


class TestFileFormats:
    def test_demo_round_trip(self, tmp_path):
        (inst, demo), = make_demos(1, seed=15)
        geom.write_lpc1(tmp_path / "c.lpc1", demo.cloud)
        save_demo(tmp_path / "d.json", demo, "c.lpc1")
        back = load_demo(tmp_path / "d.json")
        assert back.shape_id == demo.shape_id
        assert np.abs(back.pick_pose.as_matrix() - demo.pick_pose.as_matrix()).max() < 1e-12
        assert np.abs(back.cloud.points - demo.cloud.points).max() < 1e-6

    def test_bundle_round_trip_bit_exact(self, tmp_path, weights, query_sets):
        qp, qpl = query_sets
        demos = [d for _, d in make_demos(2, seed=16)]
        bundle = encode_demo_bundle(weights, demos, qp, qpl, fingerprint="deadbeef")
        save_bundle(tmp_path / "b.ldb1", bundle)
        back = load_bundle(tmp_path / "b.ldb1")
        assert np.array_equal(back.z_pick_mean, bundle.z_pick_mean)
        assert np.array_equal(back.z_place_mean, bundle.z_place_mean)
        assert back.demo_count == 2
        assert back.checkpoint_fingerprint == "deadbeef"
        assert np.array_equal(back.query_pick.points, qp.points)
        # second round trip is bitwise identical on disk
        save_bundle(tmp_path / "b2.ldb1", back)
        assert (tmp_path / "b.ldb1").read_bytes() == (tmp_path / "b2.ldb1").read_bytes()
