from __future__ import annotations

import csv
import json

import pytest
import yaml

from dsp_sensitivity_analysis.cli import main
from dsp_sensitivity_analysis.trainer import DEFAULT_LAMBDAS

SMALL_EXPERIMENT = """\
dataset:
  synthetic:
    samples_per_domain: 40
    leak_strengths: [1.0, 0.5, 0.0]
    seed: 3
  validation_fraction: 0.25
model:
  layer_sizes: [4, 5, 2]
  activation: tanh
train:
  lambda: 1e-2
  t_update: 1
  learning_rate: 0.1
  epochs: 2
  batch_size: 16
  seeds: [0, 1]
"""

QUICK_CHECKS = """\
validation:
  checks: [gradients, decomposition, contamination]
  gradient_trials: 2
  decomposition_trials: 2
  contamination_trials: 5
  seed: 4
"""


@pytest.fixture
def experiment(tmp_path):
    path = tmp_path / "experiment.yaml"
    path.write_text(SMALL_EXPERIMENT, encoding="utf-8")
    return str(path)


def write_config(tmp_path, text: str, name: str = "checks.yaml") -> str:
    path = tmp_path / name
    path.write_text(text, encoding="utf-8")
    return str(path)


class TestGenerate:
    """``dsp-reg generate``."""

    def test_writes_domains_and_manifest(self, tmp_path, experiment):
        out = tmp_path / "out"
        assert main(["generate", "--config", experiment, "--out", str(out)]) == 0
        data = out / "data"
        for name in ("domain_0.csv", "domain_1.csv", "domain_2.csv", "manifest.json"):
            assert (data / name).exists()
        resolved = yaml.safe_load((data / "resolved_config.yaml").read_text(encoding="utf-8"))
        assert resolved["dataset"]["synthetic"]["samples_per_domain"] == 40

    def test_is_idempotent(self, tmp_path, experiment):
        main(["generate", "--config", experiment, "--out", str(tmp_path / "a")])
        main(["generate", "--config", experiment, "--out", str(tmp_path / "b")])
        for name in ("domain_1.csv", "manifest.json"):
            first = (tmp_path / "a" / "data" / name).read_bytes()
            assert first == (tmp_path / "b" / "data" / name).read_bytes()

    def test_seed_flag_changes_data(self, tmp_path, experiment):
        main(["generate", "--config", experiment, "--out", str(tmp_path / "a")])
        main(["generate", "--config", experiment, "--out", str(tmp_path / "b"), "--seed", "99"])
        first = json.loads((tmp_path / "a" / "data" / "manifest.json").read_text(encoding="utf-8"))
        second = json.loads((tmp_path / "b" / "data" / "manifest.json").read_text(encoding="utf-8"))
        assert second["seed"] == 99
        assert first["files"]["0"]["sha256"] != second["files"]["0"]["sha256"]

    def test_csv_dataset_is_protocol_error(self, tmp_path):
        (tmp_path / "d.csv").write_text("domain,label,f0\na,0,1\nb,1,2\n", encoding="utf-8")
        config = write_config(tmp_path, "dataset:\n  csv: [d.csv]\n")
        assert main(["generate", "--config", config, "--out", str(tmp_path / "out")]) == 2


class TestTrain:
    """``dsp-reg train``."""

    def test_writes_run_artifacts(self, tmp_path, experiment):
        out = tmp_path / "out"
        assert main(["train", "--config", experiment, "--out", str(out), "--split", "1"]) == 0
        split_dir = out / "train" / "split1"
        for seed in (0, 1):
            run_dir = split_dir / f"seed{seed}"
            for name in (
                "metrics.jsonl",
                "params.npz",
                "summary.md",
                "sensitivity.md",
                "resolved_config.yaml",
            ):
                assert (run_dir / name).exists(), name
            snapshots = sorted(p.name for p in (run_dir / "sensitivity").iterdir())
            assert snapshots[0].startswith("epoch000_step")
            assert len(snapshots) == 2

        summary = json.loads((split_dir / "heldout_summary.json").read_text(encoding="utf-8"))
        assert summary["seeds"] == [0, 1]
        assert summary["split"] == 1
        assert summary["held_out"] == "1"
        assert set(summary["runs"]) == {"0", "1"}
        assert summary["std"]["loss"] >= 0.0

    def test_metrics_lines_are_json(self, tmp_path, experiment):
        out = tmp_path / "out"
        main(["train", "--config", experiment, "--out", str(out), "--seed", "5"])
        lines = (out / "train" / "split0" / "seed5" / "metrics.jsonl").read_text(encoding="utf-8")
        records = [json.loads(line) for line in lines.splitlines()]
        assert records
        assert all(isinstance(r, dict) for r in records)

    def test_erm_run_has_no_sensitivity_report(self, tmp_path):
        config = write_config(tmp_path, SMALL_EXPERIMENT.replace("lambda: 1e-2", "lambda: 0.0"), "erm.yaml")
        out = tmp_path / "out"
        assert main(["train", "--config", config, "--out", str(out), "--seed", "0"]) == 0
        run_dir = out / "train" / "split0" / "seed0"
        assert (run_dir / "summary.md").exists()
        assert not (run_dir / "sensitivity.md").exists()

    def test_split_out_of_range(self, tmp_path, experiment):
        assert main(["train", "--config", experiment, "--out", str(tmp_path), "--split", "5"]) == 2

    def test_bad_config_is_parse_error(self, tmp_path):
        config = write_config(tmp_path, "train:\n  lamda: 0.1\n", "bad.yaml")
        assert main(["train", "--config", config, "--out", str(tmp_path)]) == 3

    @pytest.mark.parametrize(
        "old, new",
        [("epochs: 2", "epochs: '5'"), ("layer_sizes: [4, 5, 2]", "layer_sizes: [a, 2]")],
    )
    def test_malformed_value_is_parse_error(self, tmp_path, old, new):
        config = write_config(tmp_path, SMALL_EXPERIMENT.replace(old, new), "malformed.yaml")
        assert main(["train", "--config", config, "--out", str(tmp_path)]) == 3

    def test_missing_config_file(self, tmp_path):
        assert main(["train", "--config", str(tmp_path / "absent.yaml")]) == 3


class TestValidate:
    """``dsp-reg validate``."""

    def test_passing_checks_write_report(self, tmp_path):
        config = write_config(tmp_path, QUICK_CHECKS)
        assert main(["validate", "--config", config, "--out", str(tmp_path)]) == 0
        report = json.loads((tmp_path / "validation.json").read_text(encoding="utf-8"))
        assert report["passed"] is True
        assert [c["name"] for c in report["checks"]] == ["gradients", "decomposition", "contamination"]

    def test_gradient_fault_fails(self, tmp_path):
        config = write_config(tmp_path, QUICK_CHECKS + "  fault_injection: gradient\n")
        assert main(["validate", "--config", config, "--out", str(tmp_path)]) == 1
        report = json.loads((tmp_path / "validation.json").read_text(encoding="utf-8"))
        assert report["passed"] is False
        gradients = report["checks"][0]
        assert gradients["name"] == "gradients"
        assert gradients["passed"] is False


class TestAblate:
    """``dsp-reg ablate``."""

    def test_one_split_one_seed(self, tmp_path):
        config = write_config(
            tmp_path,
            SMALL_EXPERIMENT.replace("epochs: 2", "epochs: 1").replace("seeds: [0, 1]", "seeds: [0]"),
            "ablate.yaml",
        )
        out = tmp_path / "out"
        assert main(["ablate", "--config", config, "--out", str(out), "--split", "2"]) == 0
        root = out / "ablate"
        for name in ("summary.csv", "ordering.json", "summary.md", "resolved_config.yaml"):
            assert (root / name).exists(), name

        with open(root / "summary.csv", newline="", encoding="utf-8") as fh:
            rows = list(csv.DictReader(fh))
        assert len(rows) == 10
        run_ids = {row["run_id"] for row in rows}
        assert "erm-lam0-t1" in run_ids
        for run_id in run_ids:
            assert (root / "split2" / "seed0" / run_id / "metrics.jsonl").exists()

        (selected,) = {float(row["selected_lambda"]) for row in rows}
        assert selected in DEFAULT_LAMBDAS
        assert rows[0]["run_id"] == f"dynamic-lam{selected:g}-t1"

        ordering = json.loads((root / "ordering.json").read_text(encoding="utf-8"))
        assert isinstance(ordering["full_le_uniform_le_erm"], bool)
        assert ordering["selected_lambdas"] == [selected]

    def test_fixed_lambda_skips_tuning(self, tmp_path):
        config = write_config(
            tmp_path,
            SMALL_EXPERIMENT.replace("epochs: 2", "epochs: 1").replace("seeds: [0, 1]", "seeds: [0]"),
            "ablate.yaml",
        )
        out = tmp_path / "out"
        argv = ["ablate", "--config", config, "--out", str(out), "--split", "2", "--fixed-lambda"]
        assert main(argv) == 0
        with open(out / "ablate" / "summary.csv", newline="", encoding="utf-8") as fh:
            rows = list(csv.DictReader(fh))
        assert {float(row["selected_lambda"]) for row in rows} == {0.01}
        assert rows[0]["run_id"] == "dynamic-lam0.01-t1"
