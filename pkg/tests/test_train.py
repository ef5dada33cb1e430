import numpy as np
import pytest

import descfields.diffmath as dm
import descfields.train as train
from descfields import field as fieldmod
from descfields import geom, shapes
from descfields.diffmath import Tensor
from descfields.field import FieldConfig, encode, init_weights
from descfields.train import (
    ContrastBatch,
    TrainConfig,
    TrainError,
    contrast_targets,
    contrastive_loss,
    make_contrast_batch,
    occupancy_loss,
    train_loop,
    train_step,
)

TINY_FIELD = FieldConfig(point_feat_dim=6, volume_channels=16, conv_layers=2,
                         decoder_hidden_width=16, decoder_hidden_layers=2)


@pytest.fixture(scope="module")
def tiny_dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("ds")
    shapes.generate_dataset(out, {"mug": 2, "bowl": 1, "bottle": 1}, seed=5,
                            n_surface=500, n_occ=1500)
    return shapes.load_dataset(out)


class TestContrastTargets:
    def test_closed_forms(self):
        assert contrast_targets([0, 0, 0], [[0, 0, 0]], beta=1.0)[0] == pytest.approx(1.0)
        assert contrast_targets([0, 0, 0], [[1, 0, 0]], beta=1.0)[0] == pytest.approx(0.5)

    def test_matches_independent_reciprocal(self):
        rng = np.random.default_rng(0)
        anchor = rng.normal(size=3)
        pts = rng.normal(size=(40, 3))
        got = contrast_targets(anchor, pts, beta=0.7)
        for i in range(40):
            d = float(np.sqrt(((anchor - pts[i]) ** 2).sum()))
            assert abs(got[i] - 1.0 / (d + 0.7)) < 1e-7

    def test_monotone_decreasing_and_bounded(self):
        ds = np.linspace(0, 3, 50)
        pts = np.stack([ds, np.zeros(50), np.zeros(50)], axis=1)
        t = contrast_targets([0, 0, 0], pts, beta=0.5)
        assert np.all(np.diff(t) < 0)
        assert t.max() <= 1 / 0.5 + 1e-12

    def test_beta_must_be_positive(self):
        with pytest.raises(TrainError):
            contrast_targets([0, 0, 0], [[1, 1, 1]], beta=0.0)


def _stub_query(monkeypatch, anchor_desc, other_descs):
    """Make train's query_graph return fixed descriptors (anchor call first)."""
    calls = []

    def fake(weights, volume, coords, tol=1e-9):
        calls.append(len(np.atleast_2d(coords)))
        if len(calls) % 2 == 1:
            return Tensor(anchor_desc), Tensor(np.zeros((1, 1), np.float32))
        return Tensor(other_descs), Tensor(np.zeros((len(other_descs), 1), np.float32))

    monkeypatch.setattr(train, "query_graph", fake)


class TestContrastiveLoss:
    def _batch(self, k=6):
        rng = np.random.default_rng(1)
        inst = shapes.sample_instance("mug", True, "upright", rng)
        cloud = shapes.observe(inst, rng, n_surface=300)
        cfg = TrainConfig(contrast_points_k=k)
        return make_contrast_batch(inst, cloud, cfg, rng), cfg

    def test_exact_targets_give_zero_loss(self, monkeypatch):
        batch, cfg = self._batch()
        w = init_weights(TINY_FIELD, seed=0)
        vol = encode(w, batch.cloud)
        cube_a = vol.norm_frame.to_cube(batch.anchor)
        cube_p = vol.norm_frame.to_cube(batch.points)
        targets = contrast_targets(cube_a, cube_p, cfg.beta)
        # descriptors whose cosine against the anchor equals each target
        d = 8
        anchor = np.zeros((1, d), np.float32)
        anchor[0, 0] = 1.0
        others = np.zeros((len(targets), d), np.float32)
        others[:, 0] = targets
        others[:, 1] = np.sqrt(1.0 - targets**2)
        _stub_query(monkeypatch, anchor, others)
        loss = contrastive_loss(w, batch, cfg)
        assert float(loss.data) < 1e-10

    def test_constant_similarity_one(self, monkeypatch):
        batch, cfg = self._batch()
        w = init_weights(TINY_FIELD, seed=0)
        vol = encode(w, batch.cloud)
        cube_a = vol.norm_frame.to_cube(batch.anchor)
        cube_p = vol.norm_frame.to_cube(batch.points)
        targets = contrast_targets(cube_a, cube_p, cfg.beta)
        anchor = np.full((1, 4), 0.5, np.float32)
        others = np.tile(anchor, (len(targets), 1))  # cosine exactly 1
        _stub_query(monkeypatch, anchor, others)
        loss = contrastive_loss(w, batch, cfg)
        assert float(loss.data) == pytest.approx(np.mean((1.0 - targets) ** 2), rel=1e-5)

    def test_hard_contrast_targets(self):
        batch, _ = self._batch()
        cfg = TrainConfig(loss_mode="hard_contrast", contrast_points_k=6)
        w = init_weights(TINY_FIELD, seed=0)
        loss = contrastive_loss(w, batch, cfg)
        assert np.isfinite(float(loss.data))

    def test_gradient_through_decoder_weights(self):
        batch, _ = self._batch(k=4)
        cfg = TrainConfig(contrast_points_k=4)
        w = init_weights(TINY_FIELD, seed=3)
        w.freeze()
        target = w.params["dec1_w"]

        def fn(p):
            w.params["dec1_w"] = p
            return contrastive_loss(w, batch, cfg)

        try:
            err = dm.grad_check(fn, [dm.parameter(target.data.copy())],
                                h=1e-2, max_coords=10, rng=np.random.default_rng(4))
            assert err < 1e-3
        finally:
            w.params["dec1_w"] = target
            w.thaw()


class TestOccupancyLoss:
    def test_saturated_logits_near_zero_loss(self, monkeypatch):
        w = init_weights(TINY_FIELD, seed=0)
        labels = np.array([1, 0, 1, 1], np.float32)

        def fake(weights, volume, coords, tol=1e-9):
            logits = np.where(labels > 0.5, 20.0, -20.0).astype(np.float32)
            return Tensor(np.zeros((4, 4), np.float32)), Tensor(logits.reshape(-1, 1))

        monkeypatch.setattr(train, "query_graph", fake)
        loss = occupancy_loss(w, None, np.zeros((4, 3)), labels)
        assert float(loss.data) < 1e-8

    def test_zero_logits_give_ln2(self, monkeypatch):
        w = init_weights(TINY_FIELD, seed=0)

        def fake(weights, volume, coords, tol=1e-9):
            n = len(np.atleast_2d(coords))
            return Tensor(np.zeros((n, 4), np.float32)), Tensor(np.zeros((n, 1), np.float32))

        monkeypatch.setattr(train, "query_graph", fake)
        labels = np.array([1, 0, 0, 1, 1], np.float32)
        loss = occupancy_loss(w, None, np.zeros((5, 3)), labels)
        assert float(loss.data) == pytest.approx(np.log(2), rel=1e-6)

    def test_matches_hand_rolled_bce(self, tiny_dataset):
        w = init_weights(TINY_FIELD, seed=1)
        shape = tiny_dataset[0]
        vol = encode(w, shape.cloud)
        pts, labels = train._sample_in_cube(shape.occ_points, shape.occ_labels,
                                            vol.norm_frame, 64, np.random.default_rng(0))
        loss = occupancy_loss(w, vol, pts, labels)
        logits = fieldmod.query_occupancy_logit(w, vol, pts).astype(np.float64)
        p = 1 / (1 + np.exp(-logits))
        y = labels.astype(np.float64)
        expect = np.mean(-(y * np.log(p) + (1 - y) * np.log1p(-p)))
        assert float(loss.data) == pytest.approx(expect, rel=1e-5)


class TestTrainStep:
    def test_deterministic(self, tiny_dataset):
        cfg = TrainConfig(batch_shapes=2, occ_samples_per_shape=32,
                          contrast_points_k=8, seed=0)
        records = []
        for _ in range(2):
            w = init_weights(TINY_FIELD, seed=0)
            adam = dm.AdamState(lr=cfg.lr)
            rng = np.random.default_rng(7)
            recs = [train_step(w, tiny_dataset[:2], cfg, rng, adam) for _ in range(3)]
            records.append(recs)
        assert records[0] == records[1]

    def test_occupancy_only_zeroes_contrast(self, tiny_dataset):
        cfg = TrainConfig(batch_shapes=1, occ_samples_per_shape=32,
                          loss_mode="occupancy_only")
        w = init_weights(TINY_FIELD, seed=0)
        rec = train_step(w, tiny_dataset[:1], cfg, np.random.default_rng(0),
                         dm.AdamState(lr=cfg.lr))
        assert rec["loss_contrast"] == 0.0
        assert rec["loss_total"] == rec["loss_occ"]

    def test_loss_decreases_on_toy_set(self, tiny_dataset):
        cfg = TrainConfig(batch_shapes=2, occ_samples_per_shape=48,
                          contrast_points_k=8, lr=2e-3, seed=0)
        w = init_weights(TINY_FIELD, seed=0)
        adam = dm.AdamState(lr=cfg.lr)
        rng = np.random.default_rng(0)
        losses = []
        for it in range(200):
            idx = rng.integers(0, len(tiny_dataset), size=cfg.batch_shapes)
            losses.append(train_step(w, [tiny_dataset[i] for i in idx], cfg, rng, adam)["loss_total"])
        assert np.mean(losses[-20:]) < losses[0]


class TestTrainLoop:
    def test_zero_iterations_equals_init(self, tmp_path, tiny_dataset):
        cfg = TrainConfig(iterations=0, seed=11)
        path = train_loop(cfg, TINY_FIELD, tiny_dataset, tmp_path / "run")
        loaded = fieldmod.load_checkpoint(path)
        ref = init_weights(TINY_FIELD, seed=11)
        for name in ref.params:
            assert np.array_equal(loaded.params[name].data, ref.params[name].data)

    def test_random_init_mode_skips_training(self, tmp_path, tiny_dataset):
        cfg = TrainConfig(iterations=50, loss_mode="random_init", seed=3)
        path = train_loop(cfg, TINY_FIELD, tiny_dataset, tmp_path / "run")
        loaded = fieldmod.load_checkpoint(path)
        ref = init_weights(TINY_FIELD, seed=3)
        assert np.array_equal(loaded.params["dec0_w"].data, ref.params["dec0_w"].data)

    def test_resume_reproduces_uninterrupted_run(self, tmp_path, tiny_dataset):
        cfg = TrainConfig(iterations=8, batch_shapes=1, occ_samples_per_shape=24,
                          contrast_points_k=6, checkpoint_every=4, seed=2)
        train_loop(cfg, TINY_FIELD, tiny_dataset, tmp_path / "full")
        # interrupted twin: first 4 iters land in ckpt_000004, then resume
        half = TrainConfig(**{**cfg.__dict__, "iterations": 4})
        train_loop(half, TINY_FIELD, tiny_dataset, tmp_path / "part")
        train_loop(cfg, TINY_FIELD, tiny_dataset, tmp_path / "part",
                   resume_from=tmp_path / "part" / "ckpt_000004.lck1")
        full = (tmp_path / "full" / "loss_log.csv").read_text().strip().splitlines()
        part = (tmp_path / "part" / "loss_log.csv").read_text().strip().splitlines()
        assert full[5:] == part[5:]
        a = fieldmod.load_checkpoint(tmp_path / "full" / "final.lck1")
        b = fieldmod.load_checkpoint(tmp_path / "part" / "final.lck1")
        for name in a.params:
            assert np.array_equal(a.params[name].data, b.params[name].data)

    def test_loss_log_iterations_monotone(self, tmp_path, tiny_dataset):
        cfg = TrainConfig(iterations=5, batch_shapes=1, occ_samples_per_shape=16,
                          contrast_points_k=4, checkpoint_every=0, seed=1)
        train_loop(cfg, TINY_FIELD, tiny_dataset, tmp_path / "run")
        rows = (tmp_path / "run" / "loss_log.csv").read_text().strip().splitlines()
        assert rows[0] == "iteration,loss_occ,loss_contrast,loss_total"
        its = [int(r.split(",")[0]) for r in rows[1:]]
        assert its == sorted(its) and len(set(its)) == len(its)
