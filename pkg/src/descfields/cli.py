"""Command-line entry point: reproducible experiments over one JSON config.

Every subcommand resolves its configuration (file + CLI overrides), writes
it with the checkpoint fingerprint into the run directory, and emits
deterministic artifacts given a fixed seed.  Failures exit nonzero with a
single machine-readable ERROR line on stderr.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np

from . import evaluate, shapes, transfer as transfermod
from .evaluate import BenchmarkCell, SuccessThresholds
from .field import (
    FieldConfig,
    checkpoint_sha256,
    init_weights,
    load_checkpoint,
    save_checkpoint,
)
from .geom import read_lpc1, write_lpc1
from .pose import PoseSolveConfig, generate_query_points
from .train import TrainConfig, train_loop

SECTION_TYPES = {
    "field": FieldConfig,
    "train": TrainConfig,
    "solve": PoseSolveConfig,
    "thresholds": SuccessThresholds,
}

TOP_KEYS = {"seed", "data_dir", "heldout_dir", *SECTION_TYPES}


class CliError(ValueError):
    pass


def load_run_config(path=None, overrides=None) -> dict:
    """One flat config file with typed sections; unknown keys rejected."""
    raw = {}
    if path:
        with open(path) as f:
            raw = json.load(f)
    unknown = set(raw) - TOP_KEYS
    if unknown:
        raise CliError(f"unknown config keys: {sorted(unknown)}")
    cfg = {"seed": raw.get("seed", 0),
           "data_dir": raw.get("data_dir"), "heldout_dir": raw.get("heldout_dir")}
    for name, typ in SECTION_TYPES.items():
        section = dict(raw.get(name, {}))
        valid = {f.name for f in dataclasses.fields(typ)}
        bad = set(section) - valid
        if bad:
            raise CliError(f"unknown keys in config section {name!r}: {sorted(bad)}")
        cfg[name] = section
    for dotted, value in (overrides or {}).items():
        section, _, key = dotted.partition(".")
        if not key or section not in SECTION_TYPES:
            raise CliError(f"override must look like section.key, got {dotted!r}")
        valid = {f.name for f in dataclasses.fields(SECTION_TYPES[section])}
        if key not in valid:
            raise CliError(f"unknown key {key!r} in section {section!r}")
        cfg[section][key] = value
    return cfg


def build_section(cfg: dict, name: str):
    return SECTION_TYPES[name](**cfg[name])


def _write_resolved(out_dir: Path, cfg: dict, extra: dict | None = None) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    resolved = dict(cfg)
    resolved.update(extra or {})
    with open(out_dir / "resolved_config.json", "w") as f:
        json.dump(resolved, f, indent=1, sort_keys=True)


def _parse_overrides(pairs):
    out = {}
    for pair in pairs or []:
        key, _, value = pair.partition("=")
        if not _:
            raise CliError(f"--set expects key=value, got {pair!r}")
        try:
            out[key] = json.loads(value)
        except json.JSONDecodeError:
            out[key] = value
    return out


# --- subcommand handlers -----------------------------------------------------


def cmd_gen_data(args) -> int:
    classes = args.classes.split(",")
    base, rem = divmod(args.count, len(classes))
    counts = {c: base + (1 if i < rem else 0) for i, c in enumerate(classes)}
    manifest = shapes.generate_dataset(
        args.out, counts, seed=args.seed, pose_mode=args.pose_mode,
        n_surface=args.n_surface, n_occ=args.n_occ,
        handle_fraction=args.handle_fraction)
    print(f"wrote {len(manifest)} shapes to {args.out}")
    return 0


def cmd_train(args) -> int:
    cfg = load_run_config(args.config, _parse_overrides(args.set))
    if args.seed is not None:
        cfg["train"]["seed"] = args.seed
    data_dir = args.data or cfg["data_dir"]
    if not data_dir:
        raise CliError("no dataset: pass --data or set data_dir in the config")
    dataset = shapes.load_dataset(data_dir)
    out = Path(args.out)
    field_cfg = build_section(cfg, "field")
    train_cfg = build_section(cfg, "train")
    _write_resolved(out, cfg)
    path = train_loop(train_cfg, field_cfg, dataset, out)
    sha = checkpoint_sha256(path)
    (out / "checkpoint_sha256.txt").write_text(sha + "\n")
    print(f"checkpoint {path} sha256 {sha}")
    return 0


def _load_weights(args):
    weights = load_checkpoint(args.checkpoint)
    return weights, checkpoint_sha256(args.checkpoint)


def cmd_eval_recon(args) -> int:
    cfg = load_run_config(args.config, _parse_overrides(args.set))
    weights, sha = _load_weights(args)
    held = shapes.load_dataset(args.data or cfg["heldout_dir"])
    out = Path(args.out)
    _write_resolved(out, cfg, {"checkpoint_sha256": sha})
    metrics = evaluate.recon_metrics(weights, held, grid=args.grid)
    (out / "recon.json").write_text(json.dumps(metrics, indent=1))
    print(f"iou {metrics['iou']:.4f} accuracy {metrics['accuracy']:.4f}")
    return 0


def cmd_eval_equiv(args) -> int:
    cfg = load_run_config(args.config, _parse_overrides(args.set))
    weights, sha = _load_weights(args)
    rng = np.random.default_rng(args.seed)
    per_class = {}
    for cls in args.classes.split(","):
        stats = []
        for _ in range(args.instances):
            inst = shapes.sample_instance(cls, cls == "mug", "arbitrary", rng)
            stats.append(evaluate.audit_equivariance(
                weights, inst, n_points=args.n_points,
                n_transforms=args.n_transforms, rng=rng))
        per_class[cls] = {"mean": float(np.mean([s["mean"] for s in stats])),
                          "min": float(np.min([s["min"] for s in stats]))}
    overall = float(np.mean([v["mean"] for v in per_class.values()]))
    out = Path(args.out)
    _write_resolved(out, cfg, {"checkpoint_sha256": sha})
    (out / "equivariance.json").write_text(json.dumps(
        {"overall_mean": overall, "per_class": per_class}, indent=1))
    print(f"equivariance mean cosine {overall:.4f}")
    return 0


def cmd_record_demo(args) -> int:
    rng = np.random.default_rng(args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for i in range(args.count):
        inst = shapes.sample_instance(args.demo_class, args.demo_class == "mug",
                                      args.pose_mode, rng)
        demo = transfermod.record_demo(inst, args.task, rng)
        cloud_file = f"demo_{i:03d}.lpc1"
        write_lpc1(out / cloud_file, demo.cloud)
        transfermod.save_demo(out / f"demo_{i:03d}.json", demo, cloud_file)
    print(f"wrote {args.count} demos to {out}")
    return 0


def _bundle_from_args(args, weights, sha):
    if args.bundle and Path(args.bundle).exists() and not args.demos:
        return transfermod.load_bundle(args.bundle)
    if not args.demos:
        raise CliError("need --demos (to encode) or an existing --bundle")
    demo_paths = sorted(Path(args.demos).glob("demo_*.json"))
    if not demo_paths:
        raise CliError(f"no demo_*.json files under {args.demos}")
    demos = [transfermod.load_demo(p) for p in demo_paths]
    qp = generate_query_points("gripper_contact", density=args.pick_points,
                               rng=np.random.default_rng(args.seed))
    qpl = generate_query_points("surface_volume", density=args.place_points,
                                rng=np.random.default_rng(args.seed + 1))
    bundle = transfermod.encode_demo_bundle(weights, demos, qp, qpl, fingerprint=sha)
    evaluate.attach_icp_demo(bundle, demos[0])
    if args.bundle:
        transfermod.save_bundle(args.bundle, bundle)
    return bundle


def cmd_transfer(args) -> int:
    cfg = load_run_config(args.config, _parse_overrides(args.set))
    weights, sha = _load_weights(args)
    bundle = _bundle_from_args(args, weights, sha)
    cloud = read_lpc1(args.cloud)
    solve_cfg = build_section(cfg, "solve")
    rng = np.random.default_rng(args.seed)
    out = Path(args.out)
    _write_resolved(out, cfg, {"checkpoint_sha256": sha})
    result = transfermod.transfer(weights, bundle, cloud, solve_cfg, rng, fingerprint=sha)
    payload = {}
    for name, res in (("pick", result.pick), ("place", result.place)):
        if res is None:
            continue
        payload[name] = {
            "success": res.success,
            "energy": res.best_energy,
            "pose": None if res.best_pose is None
            else [float(v) for v in res.best_pose.as_matrix().reshape(-1)],
        }
        res.write_trace_csv(out / f"trace_{name}.csv")
    (out / "transfer.json").write_text(json.dumps(payload, indent=1))
    print(json.dumps({k: v["energy"] for k, v in payload.items()}))
    return 0


def default_cells(demo_class: str, test_classes, pose_modes, trials: int):
    return [BenchmarkCell(demo_class, tc, pm, trials)
            for tc in test_classes for pm in pose_modes]


def cmd_benchmark(args) -> int:
    cfg = load_run_config(args.config, _parse_overrides(args.set))
    weights, sha = _load_weights(args)
    bundle = _bundle_from_args(args, weights, sha)
    solve_cfg = build_section(cfg, "solve")
    thresholds = build_section(cfg, "thresholds")
    cells = default_cells(args.demo_class, args.test_classes.split(","),
                          args.pose_modes.split(","), args.trials)
    out = Path(args.out)
    _write_resolved(out, cfg, {"checkpoint_sha256": sha, "solver": args.solver})
    report, records = evaluate.benchmark(
        weights, bundle, cells, thresholds, solve_cfg, seed=args.seed,
        fingerprint=sha, solver=args.solver, out_dir=out, progress=True)
    print(report.to_json())
    return 0


def cmd_ablate(args) -> int:
    cfg = load_run_config(args.config, _parse_overrides(args.set))
    arms = evaluate.DEFAULT_SWEEP_ARMS[args.axis]
    if args.arms:
        arms = [json.loads(a) if a[0].isdigit() else a for a in args.arms.split(",")]
    dataset = shapes.load_dataset(args.data or cfg["data_dir"])
    out = Path(args.out)
    _write_resolved(out, cfg, {"axis": args.axis, "arms": [str(a) for a in arms]})
    base_field = build_section(cfg, "field")
    base_train = build_section(cfg, "train")
    solve_cfg = build_section(cfg, "solve")
    thresholds = build_section(cfg, "thresholds")

    def train_fn(arm):
        field_cfg, train_cfg = base_field, base_train
        if args.axis == "loss_mode":
            train_cfg = dataclasses.replace(base_train, loss_mode=arm)
        elif args.axis == "grid_resolution":
            field_cfg = dataclasses.replace(base_field, grid_resolution=int(arm))
        elif args.axis == "n_starts":
            if (out / "arms" / "shared" / "final.lck1").exists():
                return load_checkpoint(out / "arms" / "shared" / "final.lck1")
            path = train_loop(base_train, base_field, dataset, out / "arms" / "shared")
            return load_checkpoint(path)
        path = train_loop(train_cfg, field_cfg, dataset, out / "arms" / str(arm))
        return load_checkpoint(path)

    def bench_fn(arm, weights_arm):
        rng = np.random.default_rng(args.seed)
        demos = []
        for _ in range(args.demo_count):
            inst = shapes.sample_instance(args.demo_class, args.demo_class == "mug",
                                          "upright", rng)
            demos.append(transfermod.record_demo(inst, "rim_pick_place", rng))
        qp = generate_query_points("gripper_contact", density=args.pick_points,
                                   rng=np.random.default_rng(args.seed))
        qpl = generate_query_points("surface_volume", density=args.place_points,
                                    rng=np.random.default_rng(args.seed + 1))
        bundle = transfermod.encode_demo_bundle(weights_arm, demos, qp, qpl)
        cells = default_cells(args.demo_class, args.test_classes.split(","),
                              args.pose_modes.split(","), args.trials)
        cfg_arm = solve_cfg if args.axis != "n_starts" \
            else dataclasses.replace(solve_cfg, n_starts=int(arm))
        report, _ = evaluate.benchmark(weights_arm, bundle, cells, thresholds,
                                       cfg_arm, seed=args.seed, progress=True)
        return report

    rows = evaluate.ablation_sweep(args.axis, arms, train_fn, bench_fn)
    (out / "ablation.json").write_text(json.dumps(rows, indent=1))
    for r in rows:
        print(f"{r['arm']}: grasp {r['grasp']:.3f} place {r['place']:.3f} "
              f"overall {r['overall']:.3f} (n={r['n']})")
    return 0


def cmd_dump_field(args) -> int:
    cfg = load_run_config(args.config, _parse_overrides(args.set))
    weights, sha = _load_weights(args)
    cloud = read_lpc1(args.cloud)
    anchor = np.array([float(v) for v in args.anchor.split(",")])
    out = Path(args.out)
    _write_resolved(out, cfg, {"checkpoint_sha256": sha})
    evaluate.dump_similarity_field(weights, cloud, anchor, args.grid_res,
                                   path=out / "similarity.csv")
    print(f"wrote {args.grid_res ** 3} rows to {out / 'similarity.csv'}")
    return 0


# --- parser -------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="descfields", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config=True):
        if config:
            sp.add_argument("--config", default=None, help="JSON run config")
            sp.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE",
                            help="config override")
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--out", required=True)

    sp = sub.add_parser("gen-data", help="generate a procedural shape dataset")
    common(sp, config=False)
    sp.add_argument("--classes", default="mug,bowl,bottle")
    sp.add_argument("--count", type=int, default=60)
    sp.add_argument("--pose-mode", default="arbitrary", choices=["upright", "arbitrary"])
    sp.add_argument("--n-surface", type=int, default=2048)
    sp.add_argument("--n-occ", type=int, default=12000)
    sp.add_argument("--handle-fraction", type=float, default=0.0)
    sp.set_defaults(fn=cmd_gen_data)

    sp = sub.add_parser("train", help="train a descriptor field")
    common(sp)
    sp.add_argument("--data", default=None)
    sp.set_defaults(fn=cmd_train, seed=None)

    sp = sub.add_parser("eval-recon", help="occupancy reconstruction metrics")
    common(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--data", default=None)
    sp.add_argument("--grid", type=int, default=32)
    sp.set_defaults(fn=cmd_eval_recon)

    sp = sub.add_parser("eval-equiv", help="descriptor equivariance audit")
    common(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--classes", default="mug,bowl,bottle")
    sp.add_argument("--instances", type=int, default=3)
    sp.add_argument("--n-points", type=int, default=32)
    sp.add_argument("--n-transforms", type=int, default=4)
    sp.set_defaults(fn=cmd_eval_equiv)

    sp = sub.add_parser("record-demo", help="synthesize demonstrations")
    common(sp, config=False)
    sp.add_argument("--task", default="rim_pick_place", choices=sorted(transfermod.TASKS))
    sp.add_argument("--demo-class", default="mug")
    sp.add_argument("--count", type=int, default=10)
    sp.add_argument("--pose-mode", default="upright", choices=["upright", "arbitrary"])
    sp.set_defaults(fn=cmd_record_demo)

    def bundle_args(sp):
        sp.add_argument("--demos", default=None)
        sp.add_argument("--bundle", default=None)
        sp.add_argument("--pick-points", type=int, default=10)
        sp.add_argument("--place-points", type=int, default=16)

    sp = sub.add_parser("transfer", help="transfer demos to one test cloud")
    common(sp)
    sp.add_argument("--checkpoint", required=True)
    bundle_args(sp)
    sp.add_argument("--cloud", required=True)
    sp.set_defaults(fn=cmd_transfer)

    sp = sub.add_parser("benchmark", help="pick-and-place transfer benchmark")
    common(sp)
    sp.add_argument("--checkpoint", required=True)
    bundle_args(sp)
    sp.add_argument("--demo-class", default="mug")
    sp.add_argument("--test-classes", default="mug,bowl,bottle")
    sp.add_argument("--pose-modes", default="upright,arbitrary")
    sp.add_argument("--trials", type=int, default=200)
    sp.add_argument("--solver", default="field", choices=["field", "icp"])
    sp.set_defaults(fn=cmd_benchmark)

    sp = sub.add_parser("ablate", help="ablation sweep (trains per arm)")
    common(sp)
    sp.add_argument("--axis", required=True, choices=sorted(evaluate.DEFAULT_SWEEP_ARMS))
    sp.add_argument("--arms", default=None, help="comma-separated arm list")
    sp.add_argument("--data", default=None)
    sp.add_argument("--demo-class", default="mug")
    sp.add_argument("--demo-count", type=int, default=10)
    sp.add_argument("--test-classes", default="mug")
    sp.add_argument("--pose-modes", default="arbitrary")
    sp.add_argument("--trials", type=int, default=50)
    sp.add_argument("--pick-points", type=int, default=10)
    sp.add_argument("--place-points", type=int, default=16)
    sp.set_defaults(fn=cmd_ablate)

    sp = sub.add_parser("dump-field", help="similarity field grid dump")
    common(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--cloud", required=True)
    sp.add_argument("--anchor", required=True, metavar="X,Y,Z")
    sp.add_argument("--grid-res", type=int, default=24)
    sp.set_defaults(fn=cmd_dump_field)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except Exception as e:  # noqa: BLE001 - single reporting point
        print(json.dumps({"error": type(e).__name__, "message": str(e)}),
              file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
