"""Desk-scale experiment definitions with cached artifacts.

Training runs and benchmarks are deterministic given (seed, config), so
expensive artifacts are cached on disk keyed by their exact configuration;
a cache hit is byte-equivalent to a fresh run.  The acceptance suite and
the CLI-driven experiments share this module so they agree on every knob.

Cache root: $DESCFIELDS_CACHE or ./.acceptance_cache.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
import time
from pathlib import Path

import numpy as np

from . import evaluate, shapes, transfer as transfermod
from .evaluate import BenchmarkCell, SuccessThresholds, TrialRecord
from .field import FieldConfig, checkpoint_sha256, load_checkpoint
from .pose import PoseSolveConfig, generate_query_points
from .train import TrainConfig, train_loop

DESK_FIELD = FieldConfig(
    grid_resolution=32,
    point_feat_dim=16,
    volume_channels=16,
    conv_layers=3,
    decoder_hidden_width=64,
    decoder_hidden_layers=4,
)

DESK_TRAIN = TrainConfig(
    iterations=10_000,
    batch_shapes=2,
    occ_samples_per_shape=256,
    contrast_points_k=64,
    beta=1.0,
    lambda_contrast=1.0,
    lr=3e-4,
    seed=0,
    checkpoint_every=2500,
)

# reduced configuration for the grid-resolution sweep (trains two models)
SWEEP_TRAIN = dataclasses.replace(DESK_TRAIN, iterations=2500, batch_shapes=1,
                                  checkpoint_every=0)

DESK_SOLVE = PoseSolveConfig()
DESK_THRESHOLDS = SuccessThresholds()

TRAIN_SEED = 101
HELDOUT_SEED = 707
DEMO_SEED = 2024
BENCH_SEED = 42

N_DEMOS = 10
PICK_POINTS = 10
PLACE_POINTS = 16


def cache_root() -> Path:
    root = Path(os.environ.get("DESCFIELDS_CACHE", ".acceptance_cache"))
    root.mkdir(parents=True, exist_ok=True)
    return root


def ensure_dataset(name: str, counts: dict, seed: int, pose_mode: str = "arbitrary") -> Path:
    out = cache_root() / name
    if not (out / "manifest.json").exists():
        shapes.generate_dataset(out, counts, seed=seed, pose_mode=pose_mode)
    return out


def desk_train_dataset() -> Path:
    return ensure_dataset("ds_train", {"mug": 20, "bowl": 20, "bottle": 20}, TRAIN_SEED)


def desk_heldout_dataset() -> Path:
    return ensure_dataset("ds_heldout", {"mug": 3, "bowl": 3, "bottle": 3}, HELDOUT_SEED)


def _config_blob(field_cfg: FieldConfig, train_cfg: TrainConfig) -> str:
    return json.dumps({"train": dataclasses.asdict(train_cfg),
                       "field": dataclasses.asdict(field_cfg)}, sort_keys=True)


def ensure_model(name: str, field_cfg: FieldConfig, train_cfg: TrainConfig,
                 dataset_dir: Path | None = None):
    """Train (or reuse a cached run of) a model; returns (weights, ckpt path).

    A cached run is accepted only if its recorded configuration matches the
    requested one exactly.
    """
    out = cache_root() / f"run_{name}"
    ckpt = out / "final.lck1"
    want = _config_blob(field_cfg, train_cfg)
    cfg_file = out / "train_config.json"
    if ckpt.exists() and cfg_file.exists():
        have = json.dumps(json.loads(cfg_file.read_text()), sort_keys=True)
        if have == want:
            return load_checkpoint(ckpt), ckpt
    dataset = shapes.load_dataset(dataset_dir or desk_train_dataset())
    t0 = time.monotonic()
    path = train_loop(train_cfg, field_cfg, dataset, out, log_every=500)
    (out / "train_seconds.txt").write_text(f"{time.monotonic() - t0:.1f}\n")
    return load_checkpoint(path), path


def demo_bundle(weights, ckpt_path, task: str = "rim_pick_place",
                demo_class: str = "mug", n_demos: int = N_DEMOS):
    """The benchmark's demonstration bundle: upright demos of one class."""
    rng = np.random.default_rng(DEMO_SEED)
    demos = []
    for _ in range(n_demos):
        inst = shapes.sample_instance(demo_class, demo_class == "mug", "upright", rng)
        demos.append(transfermod.record_demo(inst, task, rng))
    qp = generate_query_points("gripper_contact", density=PICK_POINTS,
                               rng=np.random.default_rng(11))
    qpl = generate_query_points("surface_volume", density=PLACE_POINTS,
                                rng=np.random.default_rng(12))
    bundle = transfermod.encode_demo_bundle(
        weights, demos, qp, qpl, fingerprint=checkpoint_sha256(ckpt_path))
    evaluate.attach_icp_demo(bundle, demos[0])
    return bundle


def _records_to_json(records):
    return json.dumps([dataclasses.asdict(r) for r in records])


def _records_from_json(text):
    return [TrialRecord(**rec) for rec in json.loads(text)]


def ensure_benchmark(tag: str, weights, bundle, cells, solve_cfg: PoseSolveConfig,
                     seed: int = BENCH_SEED, solver: str = "field",
                     thresholds: SuccessThresholds = DESK_THRESHOLDS):
    """Run (or reload) a benchmark; cache key covers every input."""
    key_src = json.dumps({
        "fingerprint": bundle.checkpoint_fingerprint,
        "cells": [dataclasses.asdict(c) for c in cells],
        "solve": dataclasses.asdict(solve_cfg),
        "thresholds": dataclasses.asdict(thresholds),
        "seed": seed,
        "solver": solver,
    }, sort_keys=True)
    key = hashlib.sha256(key_src.encode()).hexdigest()[:16]
    out = cache_root() / f"bench_{tag}"
    key_file = out / "cache_key.txt"
    rec_file = out / "records.json"
    if key_file.exists() and key_file.read_text().strip() == key and rec_file.exists():
        records = _records_from_json(rec_file.read_text())
        return evaluate.aggregate(records, bundle.checkpoint_fingerprint), records
    report, records = evaluate.benchmark(weights, bundle, cells, thresholds,
                                         solve_cfg, seed=seed,
                                         fingerprint=bundle.checkpoint_fingerprint,
                                         solver=solver, out_dir=out, progress=True)
    rec_file.write_text(_records_to_json(records))
    key_file.write_text(key + "\n")
    return report, records


def rim_cells(test_classes=("mug", "bowl", "bottle"),
              pose_modes=("upright", "arbitrary"), trials: int = 200):
    return [BenchmarkCell("mug", tc, pm, trials)
            for tc in test_classes for pm in pose_modes]
