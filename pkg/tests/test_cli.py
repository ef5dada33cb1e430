import json
import hashlib
from pathlib import Path

import numpy as np
import pytest

from descfields import cli
from descfields.cli import CliError, load_run_config, main

TINY_CONFIG = {
    "seed": 0,
    "field": {"point_feat_dim": 6, "volume_channels": 16, "conv_layers": 2,
              "decoder_hidden_width": 16, "decoder_hidden_layers": 2},
    "train": {"iterations": 4, "batch_shapes": 1, "occ_samples_per_shape": 24,
              "contrast_points_k": 6, "checkpoint_every": 0, "lr": 1e-3},
    "solve": {"n_starts": 2, "steps_per_start": 6},
}


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    ws = tmp_path_factory.mktemp("cli")
    cfg_path = ws / "cfg.json"
    cfg_path.write_text(json.dumps(TINY_CONFIG))
    assert main(["gen-data", "--out", str(ws / "data"), "--count", "6",
                 "--seed", "7", "--n-surface", "400", "--n-occ", "400"]) == 0
    return ws, cfg_path


def sha(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


class TestConfig:
    def test_unknown_top_key_rejected(self, tmp_path):
        p = tmp_path / "bad.json"
        p.write_text(json.dumps({"sed": 3}))
        with pytest.raises(CliError):
            load_run_config(p)

    def test_unknown_section_key_rejected(self, tmp_path):
        p = tmp_path / "bad.json"
        p.write_text(json.dumps({"train": {"iterationz": 10}}))
        with pytest.raises(CliError):
            load_run_config(p)

    def test_overrides_applied(self, tmp_path):
        p = tmp_path / "c.json"
        p.write_text(json.dumps({"train": {"iterations": 5}}))
        cfg = load_run_config(p, {"train.iterations": 9, "solve.n_starts": 3})
        assert cfg["train"]["iterations"] == 9
        assert cfg["solve"]["n_starts"] == 3

    def test_bad_override_rejected(self):
        with pytest.raises(CliError):
            load_run_config(None, {"train.bogus": 1})


class TestGenData:
    def test_manifest_count(self, workspace):
        ws, _ = workspace
        manifest = json.loads((ws / "data" / "manifest.json").read_text())
        assert len(manifest) == 6
        classes = {m["class"] for m in manifest}
        assert classes == {"mug", "bowl", "bottle"}


class TestTrainCli:
    def test_train_writes_checkpoint_and_resolved_config(self, workspace):
        ws, cfg = workspace
        assert main(["train", "--config", str(cfg), "--data", str(ws / "data"),
                     "--out", str(ws / "run1")]) == 0
        assert (ws / "run1" / "final.lck1").exists()
        assert (ws / "run1" / "resolved_config.json").exists()
        assert (ws / "run1" / "checkpoint_sha256.txt").exists()

    def test_train_deterministic_hash(self, workspace):
        ws, cfg = workspace
        for name in ("det_a", "det_b"):
            assert main(["train", "--config", str(cfg), "--data", str(ws / "data"),
                         "--out", str(ws / name)]) == 0
        assert sha(ws / "det_a" / "final.lck1") == sha(ws / "det_b" / "final.lck1")

    def test_missing_data_fails_cleanly(self, workspace, capsys):
        ws, cfg = workspace
        rc = main(["train", "--config", str(cfg), "--out", str(ws / "x")])
        assert rc == 1
        err = capsys.readouterr().err
        assert json.loads(err.strip().splitlines()[-1])["error"] == "CliError"


class TestPipelineCli:
    def test_demos_eval_benchmark_dump(self, workspace):
        ws, cfg = workspace
        ck = str(ws / "run1" / "final.lck1")
        assert main(["record-demo", "--out", str(ws / "demos"), "--count", "2",
                     "--seed", "3"]) == 0
        assert len(list((ws / "demos").glob("demo_*.json"))) == 2

        assert main(["eval-recon", "--config", str(cfg), "--checkpoint", ck,
                     "--data", str(ws / "data"), "--grid", "12",
                     "--out", str(ws / "recon")]) == 0
        metrics = json.loads((ws / "recon" / "recon.json").read_text())
        assert 0.0 <= metrics["iou"] <= 1.0

        assert main(["eval-equiv", "--config", str(cfg), "--checkpoint", ck,
                     "--classes", "mug", "--instances", "1", "--n-points", "6",
                     "--n-transforms", "1", "--out", str(ws / "equiv")]) == 0

        assert main(["benchmark", "--config", str(cfg), "--checkpoint", ck,
                     "--demos", str(ws / "demos"), "--bundle", str(ws / "b.ldb1"),
                     "--test-classes", "mug", "--pose-modes", "upright",
                     "--trials", "2", "--out", str(ws / "bench")]) == 0
        trials = (ws / "bench" / "trials.csv").read_text().strip().splitlines()
        assert trials[0] == ("trial,shape_id,class,pose_mode,pos_err_m,rot_err_deg,"
                             "energy,grasp_ok,place_ok,overall_ok")
        assert len(trials) == 3
        assert (ws / "b.ldb1").exists()
        report = json.loads((ws / "bench" / "report.json").read_text())
        assert report["trial_count"] == 2

        cloud_file = next((ws / "demos").glob("demo_*.lpc1"))
        assert main(["transfer", "--config", str(cfg), "--checkpoint", ck,
                     "--bundle", str(ws / "b.ldb1"), "--cloud", str(cloud_file),
                     "--out", str(ws / "tr")]) == 0
        assert (ws / "tr" / "transfer.json").exists()
        assert (ws / "tr" / "trace_pick.csv").exists()

        assert main(["dump-field", "--config", str(cfg), "--checkpoint", ck,
                     "--cloud", str(cloud_file), "--anchor", "0.0,0.0,0.05",
                     "--grid-res", "5", "--out", str(ws / "dump")]) == 0
        lines = (ws / "dump" / "similarity.csv").read_text().strip().splitlines()
        assert len(lines) == 1 + 125

    def test_benchmark_deterministic_hash(self, workspace):
        ws, cfg = workspace
        ck = str(ws / "run1" / "final.lck1")
        hashes = []
        for name in ("bd_a", "bd_b"):
            assert main(["benchmark", "--config", str(cfg), "--checkpoint", ck,
                         "--demos", str(ws / "demos"), "--test-classes", "mug",
                         "--pose-modes", "upright", "--trials", "2", "--seed", "5",
                         "--out", str(ws / name)]) == 0
            hashes.append(sha(ws / name / "trials.csv"))
        assert hashes[0] == hashes[1]

    def test_icp_solver_benchmark(self, workspace):
        ws, cfg = workspace
        ck = str(ws / "run1" / "final.lck1")
        assert main(["benchmark", "--config", str(cfg), "--checkpoint", ck,
                     "--demos", str(ws / "demos"), "--test-classes", "mug",
                     "--pose-modes", "upright", "--trials", "2",
                     "--solver", "icp", "--out", str(ws / "bench_icp")]) == 0

    def test_ablate_n_starts(self, workspace):
        ws, cfg = workspace
        assert main(["ablate", "--config", str(cfg), "--axis", "n_starts",
                     "--arms", "1,2", "--data", str(ws / "data"),
                     "--demo-count", "1", "--trials", "1",
                     "--out", str(ws / "ablate")]) == 0
        rows = json.loads((ws / "ablate" / "ablation.json").read_text())
        assert [r["arm"] for r in rows] == ["1", "2"]

    def test_bad_checkpoint_path(self, workspace, capsys):
        ws, cfg = workspace
        rc = main(["eval-recon", "--config", str(cfg), "--checkpoint",
                   str(ws / "nope.lck1"), "--data", str(ws / "data"),
                   "--out", str(ws / "y")])
        assert rc == 1
