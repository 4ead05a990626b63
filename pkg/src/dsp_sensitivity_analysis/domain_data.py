"""Synthetic multi-domain data, CSV ingestion and leave-one-domain-out splits."""

from __future__ import annotations

import csv
import logging
import os
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from ._errors import ContractError, ParseError, ProtocolError
from ._models import DomainDataset, LodoSplit, SyntheticSpec
from ._persistence import domain_csv_header, write_domain_csv, write_manifest

logger = logging.getLogger(__name__)


def _rotation(seed: int, size: int) -> np.ndarray:
    """Haar-distributed orthogonal matrix from a QR decomposition."""
    q, r = np.linalg.qr(np.random.default_rng(seed).standard_normal((size, size)))
    return q * np.sign(np.diag(r))


def label_weights(spec: SyntheticSpec) -> np.ndarray:
    """The linear label rule on the invariant block (drawn from the seed if unset)."""
    if spec.label_weights is not None:
        return np.asarray(spec.label_weights, dtype=np.float64)
    rng = np.random.default_rng(np.random.SeedSequence(spec.seed).spawn(1)[0])
    return rng.standard_normal(spec.invariant_dim)


def generate(spec: SyntheticSpec) -> List[DomainDataset]:
    """Draw one dataset per domain.

    Columns ``0..invariant_dim-1`` are the invariant block (standard normal in every
    domain); the remaining columns are the spurious block with std ``scale_d``. The
    label depends on the invariant block only; ``leak_strengths[d]`` adds ``α_d``
    times the label signal (``±1`` for classes, the score for regression) to the first
    spurious column before the optional per-domain rotation.
    """
    weights = label_weights(spec)
    children = np.random.SeedSequence(spec.seed).spawn(spec.n_domains + 1)[1:]
    domains = []
    for d, child in enumerate(children):
        rng = np.random.default_rng(child)
        n = spec.samples_per_domain
        invariant = rng.standard_normal((n, spec.invariant_dim))
        spurious = rng.standard_normal((n, spec.spurious_dim)) * spec.spurious_scales[d]
        score = invariant @ weights
        if spec.label_noise > 0:
            score = score + spec.label_noise * rng.standard_normal(n)

        if spec.task == "classification":
            labels = (score > 0).astype(np.int64)
            signal = 2.0 * labels - 1.0
            n_classes: Optional[int] = 2
        else:
            labels = score.reshape(-1, 1)
            signal = score
            n_classes = None
        spurious[:, 0] += spec.leak_strengths[d] * signal

        if spec.rotation_seeds is not None and spec.rotation_seeds[d] is not None:
            spurious = spurious @ _rotation(int(spec.rotation_seeds[d]), spec.spurious_dim).T

        domains.append(
            DomainDataset(
                domain_id=str(d),
                features=np.hstack([invariant, spurious]),
                labels=labels,
                n_classes=n_classes,
            )
        )
    logger.debug("generated %d domains of %d samples", spec.n_domains, spec.samples_per_domain)
    return domains


def lodo_splits(domains: Sequence[DomainDataset]) -> List[LodoSplit]:
    """Hold out each domain in turn; split i trains on every other domain.

    Raises:
        ProtocolError: Fewer than two domains.
    """
    if len(domains) < 2:
        raise ProtocolError(f"leave-one-domain-out needs at least two domains, got {len(domains)}")
    return [
        LodoSplit(
            index=i,
            train=tuple(d for j, d in enumerate(domains) if j != i),
            held_out=domains[i],
        )
        for i in range(len(domains))
    ]


def split_validation(
    domains: Sequence[DomainDataset], fraction: float = 0.2, seed: int = 0
) -> Tuple[List[DomainDataset], List[DomainDataset]]:
    """Carve a per-domain validation subset off every training domain.

    Returns:
        ``(train, validation)`` lists aligned with ``domains``.
    """
    if not 0.0 < fraction < 1.0:
        raise ContractError("validation fraction must lie in (0, 1)")
    children = np.random.SeedSequence(seed).spawn(len(domains))
    train, validation = [], []
    for domain, child in zip(domains, children):
        if domain.n_samples < 2:
            raise ProtocolError(
                f"domain '{domain.domain_id}' has too few samples for a validation split"
            )
        order = np.random.default_rng(child).permutation(domain.n_samples)
        n_val = min(max(1, int(fraction * domain.n_samples)), domain.n_samples - 1)
        validation.append(domain.subset(np.sort(order[:n_val])))
        train.append(domain.subset(np.sort(order[n_val:])))
    return train, validation


def load_csv(path: str, *, task: str = "auto", n_classes: Optional[int] = None) -> List[DomainDataset]:
    """Read ``domain,label,f0,...`` rows into one dataset per distinct domain.

    Args:
        path: CSV file.
        task: ``classification``, ``regression`` or ``auto`` (classification when every
            label is an integer).
        n_classes: Class count; defaults to ``max(label) + 1`` (at least 2).

    Raises:
        ParseError: Unknown header, ragged row, non-numeric or non-finite value (with
            line number).
    """
    if task not in ("auto", "classification", "regression"):
        raise ContractError(f"unknown task '{task}'")
    try:
        fh = open(path, "r", encoding="utf-8", newline="")
    except OSError as exc:
        raise ParseError(f"cannot open file: {exc.strerror}", path=path) from exc

    with fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise ParseError("empty file", path=path, line=1)
        n_features = len(header) - 2
        if n_features < 1 or header != domain_csv_header(n_features):
            raise ParseError(
                "expected header 'domain,label,f0,...,f{d-1}', got " + ",".join(header),
                path=path,
                line=1,
            )
        order: List[str] = []
        rows: Dict[str, Tuple[List[str], List[List[float]]]] = {}
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise ParseError(
                    f"expected {len(header)} fields, got {len(row)}", path=path, line=lineno
                )
            try:
                features = [float(v) for v in row[2:]]
                label = float(row[1])
            except ValueError as exc:
                raise ParseError(f"non-numeric value: {exc}", path=path, line=lineno) from exc
            if not (np.all(np.isfinite(features)) and np.isfinite(label)):
                raise ParseError("non-finite value", path=path, line=lineno)
            domain_id = row[0]
            if domain_id not in rows:
                order.append(domain_id)
                rows[domain_id] = ([], [])
            rows[domain_id][0].append(row[1])
            rows[domain_id][1].append(features)

    if not order:
        raise ParseError("no data rows", path=path, line=2)
    all_labels = np.array([float(v) for labels, _ in rows.values() for v in labels])
    if task == "auto":
        task = "classification" if np.all(np.mod(all_labels, 1) == 0) else "regression"
    if task == "classification":
        if np.any(np.mod(all_labels, 1) != 0):
            raise ParseError("class labels must be integers", path=path)
        classes = n_classes if n_classes is not None else max(2, int(all_labels.max()) + 1)
    else:
        classes = None

    datasets = []
    for domain_id in order:
        labels, features = rows[domain_id]
        label_array = np.array([float(v) for v in labels])
        datasets.append(
            DomainDataset(
                domain_id=domain_id,
                features=np.array(features, dtype=np.float64),
                labels=label_array.astype(np.int64) if classes else label_array,
                n_classes=classes,
            )
        )
    logger.debug("loaded %d domains from %s", len(datasets), path)
    return datasets


def write_domains(
    domains: Sequence[DomainDataset], output_dir: str, *, spec: Optional[SyntheticSpec] = None
) -> Dict[str, str]:
    """Write ``domain_<id>.csv`` per domain plus ``manifest.json``; returns id → path."""
    files: Dict[str, str] = {}
    for domain in domains:
        path = os.path.join(output_dir, f"domain_{domain.domain_id}.csv")
        write_domain_csv(domain, path)
        files[domain.domain_id] = path
    write_manifest(os.path.join(output_dir, "manifest.json"), spec, files)
    return files
