#!/usr/bin/env python3
"""
Integration tests for the command line surface
"""
import sys
import os
import json
import numpy as np
import pandas as pd
import pytest
from PIL import Image

# Add src to Python path
sys.path.append(os.path.join(os.path.dirname(__file__), '..', '..'))

from src.core import cli
from src.core.exceptions import NumericError
from src.core.model import AdamState, ModelParams, load_checkpoint, save_checkpoint
from src.models.pydantic_models import EvalReport
from src.storage.manifest_utils import InstanceBatch, read_manifest, write_feature_file


def write_json(path, payload):
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2))
    return path


def tree_bytes(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


class TestCommandLine:
    """End-to-end tests for simulate, train, eval, benchmark and heatmap"""

    @pytest.fixture(autouse=True)
    def workspace(self, tmp_path):
        self.root = tmp_path
        self.spec_path = write_json(tmp_path / "simulator.json", {
            "schema_version": 1, "n_slides": 30, "positive_fraction": 0.5, "patches_per_slide": 40,
            "feature_dim": 4, "tumor_fraction_range": [0.2, 0.4], "class_separation": 2.0,
            "noise_sigma": 1.0, "seed": 11,
        })
        self.run_path = write_json(tmp_path / "run.json", {
            "schema_version": 1,
            "framework": {"alpha": 0.2, "beta": 0.2},
            "train": {"epochs": 2, "batch_size": 20, "seed": 5, "validation_fraction": 0.2, "test_fraction": 0.4},
            "model": {"hidden_dims": [8]},
            "paths": {"manifest": "cohort/manifest.jsonl", "output_dir": "out"},
        })

    def simulate(self):
        assert cli.main(["simulate", "--config", str(self.spec_path), "--out", str(self.root / "cohort")]) == 0

    def test_simulate_writes_manifest(self):
        self.simulate()
        assert len(read_manifest(self.root / "cohort" / "manifest.jsonl")) == 30

    def test_simulate_is_byte_identical(self):
        self.simulate()
        assert cli.main(["simulate", "--config", str(self.spec_path), "--out", str(self.root / "again")]) == 0
        assert tree_bytes(self.root / "cohort") == tree_bytes(self.root / "again")

    def test_simulate_rejects_reversed_tumor_range(self, capsys):
        spec = json.loads(self.spec_path.read_text())
        spec["tumor_fraction_range"] = [0.5, 0.2]
        bad = write_json(self.root / "bad.json", spec)

        assert cli.main(["simulate", "--config", str(bad), "--out", str(self.root / "bad")]) == 2
        assert "tumor_fraction_range" in capsys.readouterr().err
        assert not (self.root / "bad" / "manifest.jsonl").exists()

    def test_train_checkpoint_round_trips(self):
        self.simulate()
        assert cli.main(["train", "--config", str(self.run_path)]) == 0

        out = self.root / "out"
        checkpoint = load_checkpoint(out / "checkpoint.json")
        assert checkpoint.params.layer_dims == (4, 8, 1)
        assert checkpoint.framework.alpha == 0.2
        log = json.loads((out / "train_log.json").read_text())
        assert len(log["epochs"]) == 2

    def test_train_is_deterministic(self):
        self.simulate()
        assert cli.main(["train", "--config", str(self.run_path), "--out", str(self.root / "a")]) == 0
        assert cli.main(["train", "--config", str(self.run_path), "--out", str(self.root / "b")]) == 0
        assert (self.root / "a" / "checkpoint.json").read_bytes() == (self.root / "b" / "checkpoint.json").read_bytes()

    def test_seed_flag_changes_training(self):
        self.simulate()
        assert cli.main(["train", "--config", str(self.run_path), "--out", str(self.root / "a")]) == 0
        assert cli.main(["train", "--config", str(self.run_path), "--seed", "6", "--out", str(self.root / "b")]) == 0
        assert (self.root / "a" / "checkpoint.json").read_bytes() != (self.root / "b" / "checkpoint.json").read_bytes()

    def test_alpha_zero_rejected_before_training(self, capsys):
        self.simulate()
        run = json.loads(self.run_path.read_text())
        run["framework"]["alpha"] = 0.0
        bad = write_json(self.root / "bad_run.json", run)

        assert cli.main(["train", "--config", str(bad)]) == 2
        assert "alpha" in capsys.readouterr().err
        assert not (self.root / "out" / "checkpoint.json").exists()

    def test_unknown_config_key_rejected(self):
        self.simulate()
        run = json.loads(self.run_path.read_text())
        run["framework"]["alhpa"] = 0.3
        assert cli.main(["train", "--config", str(write_json(self.root / "typo.json", run))]) == 2

    def test_unsupported_schema_version(self, capsys):
        self.simulate()
        run = json.loads(self.run_path.read_text())
        run["schema_version"] = 2
        assert cli.main(["train", "--config", str(write_json(self.root / "v2.json", run))]) == 2
        assert "schema_version" in capsys.readouterr().err

    def test_missing_manifest(self, capsys):
        assert cli.main(["train", "--config", str(self.run_path)]) == 3
        assert "manifest.jsonl" in capsys.readouterr().err

    def test_missing_config_file(self):
        assert cli.main(["train", "--config", str(self.root / "absent.json")]) == 3

    def test_numeric_failure_exit_code(self, monkeypatch):
        def failing_train(*args, **kwargs):
            raise NumericError("non-finite loss on slide slide_0001 in epoch 1")
        monkeypatch.setattr(cli, "cmd_train", failing_train)
        assert cli.main(["train", "--config", str(self.run_path)]) == 4

    def test_no_subcommand(self):
        assert cli.main([]) == 2

    def test_eval_writes_report(self):
        self.simulate()
        assert cli.main(["train", "--config", str(self.run_path)]) == 0
        assert cli.main(["eval", "--config", str(self.run_path)]) == 0

        report = EvalReport.model_validate_json((self.root / "out" / "eval_report.json").read_text())
        assert 0.0 <= report.auc <= 1.0
        assert report.n_positive > 0
        assert report.framework.alpha == 0.2
        assert len(report.per_slide) > 0

    def test_benchmark_step_half(self):
        self.simulate()
        assert cli.main(["benchmark", "--config", str(self.run_path), "--step", "0.5", "--workers", "2"]) == 0

        out = self.root / "out"
        frame = pd.read_csv(out / "benchmark.csv")
        assert list(zip(frame["alpha"], frame["beta"])) == [(0.5, 0.0), (0.5, 0.5), (1.0, 0.0)]
        assert list(frame.columns) == ["alpha", "beta", "auc", "precision", "recall", "threshold"]
        summary = json.loads((out / "benchmark_summary.json").read_text())
        assert summary["n_configurations"] == 3
        assert summary["auc_mean"] == pytest.approx(frame["auc"].mean())

    def test_benchmark_is_order_independent(self):
        self.simulate()
        assert cli.main(["benchmark", "--config", str(self.run_path), "--step", "0.5",
                         "--out", str(self.root / "serial"), "--workers", "1"]) == 0
        assert cli.main(["benchmark", "--config", str(self.run_path), "--step", "0.5",
                         "--out", str(self.root / "parallel"), "--workers", "3"]) == 0
        assert (self.root / "serial" / "benchmark.csv").read_bytes() == \
            (self.root / "parallel" / "benchmark.csv").read_bytes()

    def test_benchmark_step_one(self):
        self.simulate()
        assert cli.main(["benchmark", "--config", str(self.run_path), "--step", "1.0"]) == 0
        frame = pd.read_csv(self.root / "out" / "benchmark.csv")
        assert len(frame) == 1
        assert (frame["alpha"][0], frame["beta"][0]) == (1.0, 0.0)

    def test_benchmark_rejects_non_divisor_step(self):
        self.simulate()
        assert cli.main(["benchmark", "--config", str(self.run_path), "--step", "0.3"]) == 2

    def held_out_run(self):
        spec = json.loads(self.spec_path.read_text())
        spec["locations"] = ["breast", "colon"]
        located = write_json(self.root / "located.json", spec)
        assert cli.main(["simulate", "--config", str(located), "--out", str(self.root / "cohort")]) == 0
        run = json.loads(self.run_path.read_text())
        run["train"].update({"validation_fraction": 0.1, "test_fraction": 0.2, "held_out_locations": ["colon"]})
        return write_json(self.root / "held_out.json", run)

    def test_eval_reports_held_out_locations_separately(self):
        run_path = self.held_out_run()
        assert cli.main(["train", "--config", str(run_path)]) == 0
        assert cli.main(["eval", "--config", str(run_path)]) == 0

        report = EvalReport.model_validate_json((self.root / "out" / "eval_report.json").read_text())
        assert {entry.location for entry in report.per_location} == {"breast"}
        assert report.out_of_location is not None
        assert report.out_of_location.n_instances == 15 * 40
        assert [entry.location for entry in report.out_of_location.per_location] == ["colon"]

    def test_benchmark_out_of_location_column(self):
        run_path = self.held_out_run()
        assert cli.main(["benchmark", "--config", str(run_path), "--step", "1.0"]) == 0

        out = self.root / "out"
        frame = pd.read_csv(out / "benchmark.csv")
        assert list(frame.columns)[-1] == "out_of_location_auc"
        summary = json.loads((out / "benchmark_summary.json").read_text())
        assert summary["out_of_location"]["locations"] == ["colon"]
        assert summary["out_of_location"]["auc_mean"] == pytest.approx(frame["out_of_location_auc"][0])

    def test_train_simulates_missing_manifest_from_run_config(self):
        run = json.loads(self.run_path.read_text())
        run["simulator"] = json.loads(self.spec_path.read_text())
        run["paths"]["manifest"] = "generated/manifest.jsonl"
        run_path = write_json(self.root / "self_contained.json", run)

        assert cli.main(["train", "--config", str(run_path)]) == 0
        assert len(read_manifest(self.root / "generated" / "manifest.jsonl")) == 30
        assert (self.root / "out" / "checkpoint.json").is_file()

        # the same cohort as the standalone simulate command
        self.simulate()
        assert tree_bytes(self.root / "generated") == tree_bytes(self.root / "cohort")

    def test_simulated_manifest_name_is_fixed(self):
        run = json.loads(self.run_path.read_text())
        run["simulator"] = json.loads(self.spec_path.read_text())
        run["paths"]["manifest"] = "generated/cases.jsonl"
        assert cli.main(["train", "--config", str(write_json(self.root / "renamed.json", run))]) == 2


class TestHeatmap:
    """Tests for the heatmap command"""

    def setup_method(self):
        """Setup test fixtures"""
        # logit = feature, so -1000 -> 0, 1000 -> 1, 0 -> 0.5
        self.params = ModelParams(layer_dims=(1, 1), weights=[np.array([[1.0]])], biases=[np.array([0.0])])

    def write_slide(self, path, coords, features):
        n = len(features)
        batch = InstanceBatch(
            slide_id=path.stem,
            patch_ids=np.array([f"p{k}" for k in range(n)], dtype=object),
            coords=np.asarray(coords, dtype=np.int64),
            features=np.asarray(features, dtype=np.float64).reshape(n, 1),
        )
        return write_feature_file(path, batch, include_ground_truth=False)

    def test_two_by_two_slide(self, tmp_path):
        checkpoint = save_checkpoint(tmp_path / "ckpt.json", self.params, AdamState.fresh(self.params))
        slide = self.write_slide(tmp_path / "tiny.csv", [[0, 0], [1, 0], [0, 1], [1, 1]], [-1000.0, 1000.0, 0.0, 0.0])

        code = cli.main(["heatmap", "--checkpoint", str(checkpoint), "--slide", str(slide),
                         "--out", str(tmp_path / "maps")])
        assert code == 0

        pgm = tmp_path / "maps" / "tiny.pgm"
        assert pgm.read_bytes().startswith(b"P5")
        with Image.open(pgm) as image:
            assert image.mode == "L"
            assert image.size == (2, 2)
            assert list(image.getdata()) == [0, 255, 128, 128]
        scores = pd.read_csv(tmp_path / "maps" / "tiny_scores.csv")
        assert list(scores.columns) == ["patch_id", "x", "y", "score"]
        assert len(scores) == 4

    def test_constant_model_gives_uniform_gray(self, tmp_path):
        zero = ModelParams(layer_dims=(1, 1), weights=[np.zeros((1, 1))], biases=[np.zeros(1)])
        checkpoint = save_checkpoint(tmp_path / "ckpt.json", zero, AdamState.fresh(zero))
        coords = [[x, y] for y in range(3) for x in range(4)]
        slide = self.write_slide(tmp_path / "flat.csv", coords, np.linspace(-5, 5, 12))

        assert cli.main(["heatmap", "--checkpoint", str(checkpoint), "--slide", str(slide),
                         "--out", str(tmp_path / "maps")]) == 0
        with Image.open(tmp_path / "maps" / "flat.pgm") as image:
            assert image.size == (4, 3)
            assert set(image.getdata()) == {128}

    def test_sparse_grid_leaves_zeros(self, tmp_path):
        pixels = cli.heatmap_pixels(np.array([[0, 0], [2, 1]]), np.array([1.0, 0.5]))
        assert pixels.shape == (2, 3)
        assert pixels.tolist() == [[255, 0, 0], [0, 0, 128]]

    def test_duplicate_coordinates(self, tmp_path, capsys):
        checkpoint = save_checkpoint(tmp_path / "ckpt.json", self.params, AdamState.fresh(self.params))
        slide = self.write_slide(tmp_path / "dup.csv", [[0, 0], [1, 0], [1, 0]], [0.0, 1.0, 2.0])

        assert cli.main(["heatmap", "--checkpoint", str(checkpoint), "--slide", str(slide),
                         "--out", str(tmp_path / "maps")]) == 3
        assert "(1, 0)" in capsys.readouterr().err


if __name__ == "__main__":
    pytest.main([__file__])
