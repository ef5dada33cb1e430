"""Training: occupancy reconstruction plus the inverse-distance contrastive
objective that shapes descriptors to survive rigid transforms.

Per batch element we encode the observed cloud P and a freshly transformed
copy T.P, pair the anchor's descriptor on P with descriptors of k points on
T.P, and regress their cosine similarities onto 1/(distance + beta) targets
(distances in normalized cube units, where the fixed global scale keeps the
metric meaningful).  Loss modes cover the ablation arms: hard 0/1 targets,
occupancy-only, and untrained random weights.
"""

from __future__ import annotations

import csv
import json
import time
from dataclasses import asdict, dataclass, field as dc_field
from pathlib import Path

import numpy as np

from . import diffmath as dm
from . import field as fieldmod
from . import geom, shapes
from .diffmath import AdamState, Tape, Tensor, adam_step, zero_grads
from .field import FeatureVolume, FieldConfig, FieldWeights, encode, query_graph
from .geom import Aabb, PointCloud, SE3Pose

LOSS_MODES = ("distance_contrast", "hard_contrast", "occupancy_only", "random_init")


class TrainError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    iterations: int = 10_000
    batch_shapes: int = 4
    occ_samples_per_shape: int = 256
    contrast_points_k: int = 64
    beta: float = 1.0
    eps_sim: float = 1e-8
    lambda_contrast: float = 1.0
    lr: float = 1e-4
    seed: int = 0
    loss_mode: str = "distance_contrast"
    checkpoint_every: int = 2000
    contrast_translation: float = 0.1

    def __post_init__(self):
        if not self.beta > 0:
            raise TrainError("beta must be positive (keeps targets finite at d=0)")
        if self.contrast_points_k < 2:
            raise TrainError("contrast_points_k must be >= 2")
        for name in ("lr", "eps_sim", "occ_samples_per_shape", "batch_shapes"):
            if getattr(self, name) <= 0:
                raise TrainError(f"{name} must be positive")
        if self.loss_mode not in LOSS_MODES:
            raise TrainError(f"loss_mode must be one of {LOSS_MODES}")


@dataclass
class ContrastBatch:
    """Anchor + k-1 companions inside the object's (inflated) box, plus the
    rigid transform pairing the two encodings.  points[0] is the anchor."""

    anchor: np.ndarray
    points: np.ndarray  # [k,3] world frame, anchor first
    transform: SE3Pose
    cloud: PointCloud
    cloud_transformed: PointCloud


def contrast_targets(anchor, points, beta: float) -> np.ndarray:
    """Inverse-distance targets t_i = 1 / (|x0 - xi| + beta)."""
    if not beta > 0:
        raise TrainError("beta must be positive")
    d = np.linalg.norm(np.atleast_2d(points) - np.asarray(anchor), axis=1)
    return 1.0 / (d + beta)


def make_contrast_batch(instance: shapes.ShapeInstance, cloud: PointCloud,
                        cfg: TrainConfig, rng: np.random.Generator,
                        cube_size_m: float = 0.4) -> ContrastBatch:
    """Sample k points in the object box and a fresh rigid transform.

    Points are rejection-sampled so that both the point (in P's normalized
    frame) and its transformed copy (in T.P's frame) stay inside the unit
    cube; rotations do not preserve the max-norm, so corner-region samples
    would otherwise leak out.
    """
    box = shapes.world_aabb(instance).inflated(1.1)
    lim = cfg.contrast_translation
    t_bounds = Aabb(-lim * np.ones(3), lim * np.ones(3))
    transform = geom.random_se3(rng, t_bounds)
    c1 = cloud.points.mean(axis=0)
    c2 = transform.rotation @ c1 + transform.translation
    scale = 1.0 / cube_size_m
    margin = 0.49
    kept = []
    total = 0
    for _ in range(64):
        pts = box.sample(rng, cfg.contrast_points_k)
        cube1 = (pts - c1) * scale
        cube2 = (transform.apply(pts) - c2) * scale
        ok = (np.abs(cube1).max(axis=1) <= margin) & (np.abs(cube2).max(axis=1) <= margin)
        kept.append(pts[ok])
        total += int(ok.sum())
        if total >= cfg.contrast_points_k:
            break
    pts = np.concatenate(kept)[: cfg.contrast_points_k]
    if len(pts) < cfg.contrast_points_k:
        raise TrainError("could not place contrast points inside the cube; "
                         "object too large for cube_size_m")
    return ContrastBatch(
        anchor=pts[0],
        points=pts,
        transform=transform,
        cloud=cloud,
        cloud_transformed=geom.se3_apply(transform, cloud),
    )


def _contrast_loss_on_volumes(weights: FieldWeights, vol_a: FeatureVolume,
                              vol_b: FeatureVolume, batch: ContrastBatch,
                              cfg: TrainConfig) -> Tensor:
    desc_a, _ = query_graph(weights, vol_a, batch.anchor[None, :])
    moved = batch.transform.apply(batch.points)
    desc_b, _ = query_graph(weights, vol_b, moved)
    sims = dm.cosine_similarity(desc_a, desc_b, eps=cfg.eps_sim)
    if cfg.loss_mode == "hard_contrast":
        targets = np.zeros(len(batch.points))
        targets[0] = 1.0
    else:
        cube_anchor = vol_a.norm_frame.to_cube(batch.anchor)
        cube_points = vol_a.norm_frame.to_cube(batch.points)
        targets = contrast_targets(cube_anchor, cube_points, cfg.beta)
    return dm.mean_(dm.square(dm.sub(sims, Tensor(targets.astype(np.float32)))))


def contrastive_loss(weights: FieldWeights, batch: ContrastBatch,
                     cfg: TrainConfig | None = None) -> Tensor:
    """Mean squared gap between cosine similarities and their targets."""
    cfg = cfg or TrainConfig()
    vol_a = encode(weights, batch.cloud)
    vol_b = encode(weights, batch.cloud_transformed)
    return _contrast_loss_on_volumes(weights, vol_a, vol_b, batch, cfg)


def occupancy_loss(weights: FieldWeights, volume: FeatureVolume,
                   points: np.ndarray, labels: np.ndarray) -> Tensor:
    """Mean binary cross entropy with logits over the labeled sample set."""
    _, logits = query_graph(weights, volume, points)
    return dm.mean_(dm.bce_with_logits(logits, np.asarray(labels, np.float32).reshape(-1, 1)))


def _sample_in_cube(points, labels, frame, n, rng):
    """Subsample occupancy points, keeping only those inside the unit cube."""
    cube = frame.to_cube(points)
    ok = np.all(np.abs(cube) <= 0.5, axis=1)
    idx = np.flatnonzero(ok)
    take = rng.choice(idx, size=min(n, len(idx)), replace=False)
    return points[take], labels[take]


def train_step(weights: FieldWeights, batch: list[shapes.DatasetShape],
               cfg: TrainConfig, rng: np.random.Generator,
               adam: AdamState) -> dict:
    """One Adam update over the combined loss on a batch of dataset shapes."""
    use_contrast = cfg.loss_mode in ("distance_contrast", "hard_contrast")
    lam = 0.0 if cfg.loss_mode == "occupancy_only" else cfg.lambda_contrast
    occ_terms, con_terms = [], []
    with Tape() as tape:
        for shape in batch:
            cbatch = make_contrast_batch(shape.instance, shape.cloud, cfg, rng)
            vol_a = encode(weights, shape.cloud)
            pts, labels = _sample_in_cube(shape.occ_points, shape.occ_labels,
                                          vol_a.norm_frame, cfg.occ_samples_per_shape, rng)
            occ_terms.append(occupancy_loss(weights, vol_a, pts, labels))
            if use_contrast:
                vol_b = encode(weights, cbatch.cloud_transformed)
                con_terms.append(_contrast_loss_on_volumes(weights, vol_a, vol_b, cbatch, cfg))
        n = float(len(batch))
        occ_total = dm.mul(_sum_terms(occ_terms), 1.0 / n)
        if con_terms:
            con_total = dm.mul(_sum_terms(con_terms), 1.0 / n)
            total = dm.add(occ_total, dm.mul(con_total, lam))
        else:
            con_total = Tensor(np.zeros(()))
            total = occ_total
        try:
            tape.backward(total)
        except FloatingPointError as e:
            raise TrainError(f"non-finite loss at adam step {adam.step_count}: {e}") from e
    adam_step(weights.params, adam)
    zero_grads(weights.params)
    return {
        "loss_occ": float(occ_total.data),
        "loss_contrast": float(con_total.data),
        "loss_total": float(total.data),
    }


def _sum_terms(terms):
    acc = terms[0]
    for t in terms[1:]:
        acc = dm.add(acc, t)
    return acc


def _state_path(ckpt_path: Path) -> Path:
    return ckpt_path.with_suffix(".trainstate.npz")


def _save_state(path: Path, weights: FieldWeights, adam: AdamState,
                rng: np.random.Generator, iteration: int) -> None:
    fieldmod.save_checkpoint(path, weights)
    arrays = {}
    for name, m in adam.m.items():
        arrays[f"m::{name}"] = m
        arrays[f"v::{name}"] = adam.v[name]
    np.savez(
        _state_path(path),
        __meta=np.frombuffer(json.dumps({
            "iteration": iteration,
            "step_count": adam.step_count,
            "rng_state": rng.bit_generator.state,
        }).encode(), dtype=np.uint8),
        **arrays,
    )


def _load_state(path: Path, adam: AdamState, rng: np.random.Generator) -> int:
    data = np.load(_state_path(path))
    meta = json.loads(bytes(data["__meta"]).decode())
    for key in data.files:
        if key.startswith("m::"):
            adam.m[key[3:]] = data[key].copy()
        elif key.startswith("v::"):
            adam.v[key[3:]] = data[key].copy()
    adam.step_count = meta["step_count"]
    rng.bit_generator.state = meta["rng_state"]
    return meta["iteration"]


def train_loop(cfg: TrainConfig, field_cfg: FieldConfig,
               dataset: list[shapes.DatasetShape], out_dir,
               resume_from=None, log_every: int = 50) -> Path:
    """Run training; writes checkpoints + loss CSV, returns the final path.

    random_init mode skips optimization and just writes the initialization.
    Resume restores weights, Adam moments and the RNG stream, so a resumed
    run reproduces the uninterrupted loss sequence exactly.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if not dataset:
        raise TrainError("dataset is empty")
    with open(out / "train_config.json", "w") as f:
        json.dump({"train": asdict(cfg), "field": asdict(field_cfg)}, f, indent=1)

    rng = np.random.default_rng(cfg.seed)
    adam = AdamState(lr=cfg.lr)
    start_iter = 0
    if resume_from is not None:
        weights = fieldmod.load_checkpoint(resume_from)
        start_iter = _load_state(Path(resume_from), adam, rng)
    else:
        weights = fieldmod.init_weights(field_cfg, seed=cfg.seed)

    final_path = out / "final.lck1"
    if cfg.loss_mode == "random_init" or cfg.iterations == 0:
        fieldmod.save_checkpoint(final_path, weights)
        return final_path

    log_path = out / "loss_log.csv"
    log_mode = "a" if resume_from is not None else "w"
    t0 = time.monotonic()
    with open(log_path, log_mode, newline="") as logf:
        writer = csv.writer(logf)
        if log_mode == "w":
            writer.writerow(["iteration", "loss_occ", "loss_contrast", "loss_total"])
        for it in range(start_iter, cfg.iterations):
            idx = rng.integers(0, len(dataset), size=cfg.batch_shapes)
            batch = [dataset[i] for i in idx]
            try:
                rec = train_step(weights, batch, cfg, rng, adam)
            except TrainError:
                # keep the last good periodic checkpoint; surface the failure
                raise
            writer.writerow([it, f"{rec['loss_occ']:.6f}",
                             f"{rec['loss_contrast']:.6f}", f"{rec['loss_total']:.6f}"])
            if log_every and (it % log_every == 0 or it == cfg.iterations - 1):
                logf.flush()
                elapsed = time.monotonic() - t0
                done = it - start_iter + 1
                print(f"iter {it}: occ {rec['loss_occ']:.4f} contrast {rec['loss_contrast']:.4f} "
                      f"total {rec['loss_total']:.4f} [{done / max(elapsed, 1e-9):.2f} it/s]",
                      flush=True)
            if cfg.checkpoint_every and (it + 1) % cfg.checkpoint_every == 0:
                ck = out / f"ckpt_{it + 1:06d}.lck1"
                _save_state(ck, weights, adam, rng, it + 1)
    fieldmod.save_checkpoint(final_path, weights)
    return final_path
