import csv
import json
from pathlib import Path

import numpy as np
import pytest

from p4d.cli import run


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("data")
    code = run([
        "gen-data", "--scenes", "3", "--test-scenes", "2", "--out", str(out),
        "--seed", "9", "--frames", "4", "--actors-min", "1", "--actors-max", "3",
        "--ground-points", "600",
    ])
    assert code == 0
    return out


class TestGenData:
    def test_writes_manifest_and_scenes(self, dataset):
        manifest = json.loads((dataset / "manifest.json").read_text())
        assert len(manifest["splits"]["train"]) == 3
        assert len(manifest["splits"]["test"]) == 2
        assert manifest["seed"] == 9  # resolved config embedded

    def test_zero_scenes_is_usage_error(self, tmp_path):
        assert run(["gen-data", "--scenes", "0", "--out", str(tmp_path)]) == 1

    def test_unknown_flag_rejected(self, tmp_path):
        assert run(["gen-data", "--scenes", "1", "--out", str(tmp_path),
                    "--bogus", "1"]) == 1

    def test_reproducible(self, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        for out in (a, b):
            assert run(["gen-data", "--scenes", "2", "--out", str(out),
                        "--seed", "4", "--frames", "4"]) == 0
        for name in json.loads((a / "manifest.json").read_text())["splits"]["train"]:
            assert (a / name).read_bytes() == (b / name).read_bytes()


class TestTrainEval:
    def test_train_then_eval(self, dataset, tmp_path):
        out = tmp_path / "run"
        code = run([
            "train", "--data", str(dataset), "--out", str(out), "--seed", "1",
            "--variant", "pc1", "--steps", "3", "--batch-size", "1", "--frames", "2",
        ])
        assert code == 0
        assert (out / "model.ckpt").exists()
        assert (out / "loss.csv").exists()
        assert (out / "model_config.json").exists()  # resolved config embedded
        assert (out / "train_config.json").exists()
        lines = (out / "loss.csv").read_text().splitlines()
        assert lines[0] == "step,lr,cls_loss,reg_loss,total"
        assert len(lines) == 4

        report = tmp_path / "report.csv"
        code = run([
            "eval", "--data", str(dataset), "--run-dir", str(out),
            "--split", "test", "--out", str(report), "--limit", "2",
        ])
        assert code == 0
        rows = list(csv.DictReader(report.open()))
        assert len(rows) == 1
        assert rows[0]["config_name"] == "pc1"
        assert 0.0 <= float(rows[0]["ap_all"]) <= 1.0

    def test_missing_data_dir_is_runtime_error(self, tmp_path):
        assert run(["train", "--data", str(tmp_path / "nope"),
                    "--out", str(tmp_path / "o"), "--steps", "1"]) == 2


class TestDensity:
    def test_far_bin_grows_with_accumulation(self, tmp_path):
        out = tmp_path / "density.csv"
        code = run([
            "density", "--frames", "1", "--frames", "16", "--scenes", "3",
            "--seed", "7", "--out", str(out),
        ])
        assert code == 0
        rows = list(csv.DictReader(out.open()))
        assert set(r["frames_accumulated"] for r in rows) == {"1", "16"}

        def value(frames, lo):
            for r in rows:
                if r["frames_accumulated"] == frames and float(r["range_bin_low"]) == lo:
                    return float(r["mean_points_per_cell"])
            raise KeyError

        # far bins gain the most from accumulation
        assert value("16", 24.0) > value("1", 24.0)
        assert value("16", 40.0) > value("1", 40.0)

    def test_bad_frames_rejected(self, tmp_path):
        assert run(["density", "--frames", "0", "--scenes", "1"]) == 1


class TestGradCheck:
    def test_passes_and_reports_every_kind(self, capsys):
        code = run(["grad-check", "--trials", "2", "--seed", "3"])
        out = capsys.readouterr().out
        assert code == 0
        assert "fusion_layer (composed)" in out
        assert "affine" in out and "conv2d" in out and "max_pool" in out
        assert "FAIL" not in out


class TestAblateSmoke:
    def test_tiny_grid_runs(self, dataset, tmp_path):
        out = tmp_path / "study"
        code = run([
            "ablate", "--data", str(dataset), "--out", str(out),
            "--seeds", "1", "--steps", "2", "--jobs", "1",
            "--variants", "pc1", "--test-limit", "1",
        ])
        assert code == 0
        rows = list(csv.DictReader((out / "report.csv").open()))
        assert len(rows) == 1
        assert rows[0]["config_name"] == "pc1"

    def test_unknown_variant_rejected(self, dataset, tmp_path):
        assert run(["ablate", "--data", str(dataset), "--out", str(tmp_path),
                    "--variants", "warp-drive"]) == 2
