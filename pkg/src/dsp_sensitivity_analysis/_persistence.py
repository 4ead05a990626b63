"""File formats written and read by the package.

Everything that touches the filesystem goes through here so that directory
creation, encoding and float formatting stay uniform: UTF-8, ``\\n`` line endings
and 17 significant digits for every float written to CSV.
"""

from __future__ import annotations

import csv
import hashlib
import json
import os
from dataclasses import asdict, is_dataclass
from typing import Any, Dict, Iterable, List, Mapping, Sequence

import numpy as np

from ._errors import ParseError
from ._models import (
    DomainDataset,
    EpochRecord,
    ParameterVector,
    RunMetrics,
    Segment,
    SensitivityReport,
)


def format_float(value: float) -> str:
    return f"{float(value):.17g}"


def _ensure_parent(output_path: str) -> None:
    output_dir = os.path.dirname(output_path)
    if output_dir:
        os.makedirs(output_dir, exist_ok=True)


def write_lines(output_path: str, lines: Iterable[str]) -> None:
    _ensure_parent(output_path)
    with open(output_path, "w", encoding="utf-8", newline="\n") as fh:
        fh.writelines(lines)


def write_csv(output_path: str, header: Sequence[str], rows: Iterable[Sequence[Any]]) -> None:
    _ensure_parent(output_path)
    with open(output_path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow(row)


def _jsonable(value: Any) -> Any:
    if is_dataclass(value) and not isinstance(value, type):
        return _jsonable(asdict(value))
    if isinstance(value, Mapping):
        return {str(k): _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    if isinstance(value, np.ndarray):
        return _jsonable(value.tolist())
    if isinstance(value, np.generic):
        return value.item()
    return value


def write_json(output_path: str, payload: Any) -> None:
    write_lines(output_path, [json.dumps(_jsonable(payload), indent=2, sort_keys=True), "\n"])


def read_json(path: str) -> Any:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            return json.load(fh)
    except json.JSONDecodeError as exc:
        raise ParseError(exc.msg, path=path, line=exc.lineno) from exc


def sha256_file(path: str) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 16), b""):
            digest.update(block)
    return digest.hexdigest()


# Domain data ---------------------------------------------------------------


def domain_csv_header(n_features: int) -> List[str]:
    return ["domain", "label", *[f"f{i}" for i in range(n_features)]]


def write_domain_csv(dataset: DomainDataset, output_path: str) -> None:
    """Write one domain as ``domain,label,f0..f{d-1}`` rows."""
    if not dataset.is_classification and dataset.labels.shape[1] != 1:
        raise ParseError(
            "the CSV format holds a single regression target per row", path=output_path
        )

    def rows():
        for i in range(dataset.n_samples):
            if dataset.is_classification:
                label = str(int(dataset.labels[i]))
            else:
                label = format_float(dataset.labels[i, 0])
            yield [dataset.domain_id, label, *[format_float(v) for v in dataset.features[i]]]

    write_csv(output_path, domain_csv_header(dataset.n_features), rows())


def write_manifest(output_path: str, spec: Any, files: Mapping[str, str]) -> None:
    """Record the generating spec and the sha256 of every written file.

    ``files`` maps domain id to file path; paths are stored relative to the manifest.
    """
    base = os.path.dirname(output_path)
    entries = {
        domain_id: {
            "file": os.path.relpath(path, base) if base else path,
            "sha256": sha256_file(path),
        }
        for domain_id, path in files.items()
    }
    write_json(output_path, {"spec": spec, "seed": getattr(spec, "seed", None), "files": entries})


# Sensitivity ---------------------------------------------------------------


def write_sensitivity_csv(report: SensitivityReport, output_path: str) -> None:
    """Rows ordered by flat index: ``param_index,segment,local_index,s_d0..,mean,var,cv``."""
    header = [
        "param_index",
        "segment",
        "local_index",
        *[f"s_d{d}" for d in range(report.n_domains)],
        "mean",
        "var",
        "cv",
    ]

    def rows():
        for k in range(report.n_params):
            segment, local = report.locate(k)
            yield [
                k,
                segment,
                local,
                *[format_float(v) for v in report.per_domain[k]],
                format_float(report.mean[k]),
                format_float(report.variance[k]),
                format_float(report.cv[k]),
            ]

    write_csv(output_path, header, rows())


def read_sensitivity_csv(path: str) -> Dict[str, np.ndarray]:
    """Load the numeric columns of a sensitivity CSV back as arrays."""
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or header[:3] != ["param_index", "segment", "local_index"]:
            raise ParseError("not a sensitivity CSV", path=path, line=1)
        rows = list(reader)
    domain_cols = [i for i, name in enumerate(header) if name.startswith("s_d")]
    try:
        per_domain = np.array([[float(r[i]) for i in domain_cols] for r in rows])
        columns = {
            name: np.array([float(r[header.index(name)]) for r in rows])
            for name in ("mean", "var", "cv")
        }
    except (ValueError, IndexError) as exc:
        raise ParseError(f"malformed sensitivity row: {exc}", path=path) from exc
    columns["per_domain"] = per_domain.reshape(len(rows), len(domain_cols))
    return columns


# Training runs -------------------------------------------------------------


def epoch_payload(record: EpochRecord) -> Dict[str, Any]:
    payload = _jsonable(asdict(record))
    payload["step_seconds"] = record.step_seconds
    return payload


def write_metrics_jsonl(metrics: RunMetrics, output_path: str) -> None:
    """One JSON object per completed epoch, keys sorted."""
    write_lines(
        output_path,
        (json.dumps(epoch_payload(record), sort_keys=True) + "\n" for record in metrics.records),
    )


def read_metrics_jsonl(path: str) -> List[Dict[str, Any]]:
    records = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                records.append(json.loads(line))
            except json.JSONDecodeError as exc:
                raise ParseError(exc.msg, path=path, line=lineno) from exc
    return records


def save_params(params: ParameterVector, output_path: str) -> None:
    """Dump θ, Var(θ) and the segment registry to ``.npz``."""
    _ensure_parent(output_path)
    np.savez(
        output_path,
        values=params.values,
        variances=params.variances,
        segment_names=np.array(params.names, dtype=str),
        segment_offsets=np.array([seg.offset for seg in params.segments], dtype=np.int64),
        segment_shapes=np.array(
            [json.dumps(list(seg.shape)) for seg in params.segments], dtype=str
        ),
    )


def load_params(path: str) -> ParameterVector:
    with np.load(path) as data:
        segments = []
        for name, offset, shape in zip(
            data["segment_names"], data["segment_offsets"], data["segment_shapes"]
        ):
            shape = tuple(json.loads(str(shape)))
            segments.append(
                Segment(
                    name=str(name),
                    offset=int(offset),
                    length=int(np.prod(shape, dtype=np.int64)),
                    shape=shape,
                )
            )
        return ParameterVector(
            values=data["values"], variances=data["variances"], segments=tuple(segments)
        )


SUMMARY_HEADER = ("run_id", "mode", "lambda", "t_update", "seed", "split", "heldout_metric")


def write_summary_csv(rows: Iterable[Mapping[str, Any]], output_path: str) -> None:
    """Ablation summary; extra keys beyond the fixed header are appended as columns."""
    rows = list(rows)
    extra = sorted({key for row in rows for key in row} - set(SUMMARY_HEADER))
    header = [*SUMMARY_HEADER, *extra]

    def cells(row):
        out = []
        for key in header:
            value = row.get(key, "")
            out.append(format_float(value) if isinstance(value, float) else value)
        return out

    write_csv(output_path, header, (cells(row) for row in rows))
