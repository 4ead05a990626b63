from __future__ import annotations

import numpy as np
import pytest

from dsp_sensitivity_analysis._errors import ParseError
from dsp_sensitivity_analysis._models import EpochRecord, ModelSpec, RunMetrics
from dsp_sensitivity_analysis._persistence import (
    format_float,
    load_params,
    read_json,
    read_metrics_jsonl,
    read_sensitivity_csv,
    save_params,
    sha256_file,
    write_json,
    write_metrics_jsonl,
    write_sensitivity_csv,
    write_summary_csv,
)
from dsp_sensitivity_analysis.models import init_params


class TestParams:
    """``params.npz`` files."""

    def test_values_variances_and_segments_survive(self, tmp_path):
        spec = ModelSpec(layer_sizes=(3, 4, 2), init_seed=9)
        params = init_params(spec).with_variances(np.linspace(0.1, 1.0, 26))
        path = str(tmp_path / "run" / "params.npz")
        save_params(params, path)
        loaded = load_params(path)
        np.testing.assert_array_equal(loaded.values, params.values)
        np.testing.assert_array_equal(loaded.variances, params.variances)
        assert loaded.segments == params.segments
        assert loaded.names == ["layer1.weight", "layer1.bias", "layer2.weight", "layer2.bias"]


class TestSensitivityCsv:
    """Per-parameter sensitivity tables."""

    def test_rows_carry_segment_and_local_index(self, hand_report, tmp_path):
        path = tmp_path / "s.csv"
        write_sensitivity_csv(hand_report, str(path))
        lines = path.read_text(encoding="utf-8").splitlines()
        assert lines[0] == "param_index,segment,local_index,s_d0,s_d1,mean,var,cv"
        assert lines[8].startswith("7,layer2.weight,1,0,4,2,4,1")
        assert len(lines) == 10

    def test_reload(self, hand_report, tmp_path):
        path = str(tmp_path / "s.csv")
        write_sensitivity_csv(hand_report, path)
        loaded = read_sensitivity_csv(path)
        np.testing.assert_array_equal(loaded["per_domain"], hand_report.per_domain)
        np.testing.assert_array_equal(loaded["var"], hand_report.variance)

    def test_foreign_csv_rejected(self, tmp_path):
        path = tmp_path / "other.csv"
        path.write_text("a,b\n1,2\n", encoding="utf-8")
        with pytest.raises(ParseError):
            read_sensitivity_csv(str(path))


class TestMetricsJsonl:
    """One JSON object per epoch."""

    def test_write_and_read(self, tmp_path):
        metrics = RunMetrics(mode="uniform")
        metrics.add_record(
            EpochRecord(
                epoch=0,
                train_loss=0.5,
                train_sup_loss=0.4,
                reg_value=1.0,
                source_loss=0.45,
                domain_metrics={"0": {"loss": 0.4}},
                seconds=2.0,
                refresh_seconds=0.5,
                steps=10,
            )
        )
        path = str(tmp_path / "metrics.jsonl")
        write_metrics_jsonl(metrics, path)
        (record,) = read_metrics_jsonl(path)
        assert record["epoch"] == 0
        assert record["domain_metrics"] == {"0": {"loss": 0.4}}
        assert record["step_seconds"] == pytest.approx(1.5)

    def test_bad_line_reports_line_number(self, tmp_path):
        path = tmp_path / "metrics.jsonl"
        path.write_text('{"epoch": 0}\n\n{broken\n', encoding="utf-8")
        with pytest.raises(ParseError) as excinfo:
            read_metrics_jsonl(str(path))
        assert excinfo.value.line == 3


class TestJsonAndCsv:
    """Generic writers."""

    def test_json_converts_numpy_values(self, tmp_path):
        path = str(tmp_path / "a" / "b.json")
        write_json(path, {"x": np.float64(0.5), "v": np.arange(3), "n": np.int64(4)})
        assert read_json(path) == {"x": 0.5, "v": [0, 1, 2], "n": 4}

    def test_floats_keep_full_precision(self):
        value = 0.1 + 0.2
        assert float(format_float(value)) == value

    def test_summary_csv_appends_extra_columns(self, tmp_path):
        path = tmp_path / "summary.csv"
        rows = [
            {"run_id": "a", "mode": "erm", "lambda": 0.0, "t_update": 2, "seed": 0, "split": 1, "heldout_metric": 0.25, "accuracy": 0.75}
        ]
        write_summary_csv(rows, str(path))
        header, row = path.read_text(encoding="utf-8").splitlines()
        assert header == "run_id,mode,lambda,t_update,seed,split,heldout_metric,accuracy"
        assert row == "a,erm,0,2,0,1,0.25,0.75"

    def test_sha256_is_stable(self, tmp_path):
        path = tmp_path / "f.txt"
        path.write_bytes(b"abc")
        assert sha256_file(str(path)) == (
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        )
