"""Fully connected classifiers and regressors with named parameter segments."""

from __future__ import annotations

from typing import Dict, Tuple, Union

import numpy as np

from ._errors import DataError
from ._models import DomainDataset, ModelSpec, ParameterVector, Segment, Tensor
from ._tape import Tape
from .autodiff import forward, record

Batch = Union[DomainDataset, Tuple[np.ndarray, np.ndarray]]


def init_params(spec: ModelSpec) -> ParameterVector:
    """Draw initial parameters for ``spec``.

    Weights are uniform in ``±1/sqrt(fan_in)``, biases are zero and every Var(θ_k)
    starts at 1.0. Segments are ``layerN.weight`` (``out × in``) then ``layerN.bias``
    for N = 1..L.
    """
    rng = np.random.default_rng(spec.init_seed)
    blocks = []
    segments = []
    offset = 0
    for name, shape in spec.segment_shapes():
        if name.endswith(".weight"):
            bound = 1.0 / np.sqrt(shape[1])
            block = rng.uniform(-bound, bound, size=shape)
        else:
            block = np.zeros(shape)
        length = int(np.prod(shape))
        segments.append(Segment(name=name, offset=offset, length=length, shape=tuple(shape)))
        blocks.append(block.reshape(-1))
        offset += length
    values = np.concatenate(blocks) if blocks else np.zeros(0)
    return ParameterVector(values=values, variances=np.ones_like(values), segments=tuple(segments))


def _unpack(spec: ModelSpec, batch: Batch) -> Tuple[np.ndarray, np.ndarray]:
    if isinstance(batch, DomainDataset):
        features, labels = batch.features, batch.labels
        classification = batch.is_classification
    else:
        features, labels = batch
        labels = np.asarray(labels)
        classification = spec.head == "softmax-ce"
    if spec.head == "softmax-ce":
        if not classification:
            raise DataError("softmax-ce head needs integer class labels")
        labels = np.asarray(labels)
        if labels.size and not np.all(np.equal(np.mod(labels, 1), 0)):
            raise DataError("class labels must be integers")
        labels = labels.astype(np.int64).reshape(-1)
        if labels.size and (labels.min() < 0 or labels.max() >= spec.output_dim):
            raise DataError(
                f"class label out of range [0, {spec.output_dim}): "
                f"found {int(labels.min())}..{int(labels.max())}"
            )
    else:
        if isinstance(batch, DomainDataset) and classification:
            raise DataError("mse head needs real-valued targets")
        labels = np.asarray(labels, dtype=np.float64)
        if labels.ndim == 1:
            labels = labels.reshape(-1, 1)
    return np.asarray(features, dtype=np.float64), labels


def attach_loss(tape: Tape, spec: ModelSpec, labels: np.ndarray, *, reduction: str) -> int:
    """Append the head's loss on top of ``tape.output``."""
    if spec.head == "softmax-ce":
        return tape.softmax_cross_entropy(tape.output, labels, reduction=reduction)
    return tape.mse(tape.output, labels, reduction=reduction)


def supervised_loss(
    spec: ModelSpec, params: ParameterVector, batch: Batch, *, reduction: str = "mean"
) -> Tuple[Tape, int]:
    """Record ``L_sup`` on ``batch`` and return ``(tape, loss node)``.

    ``reduction='mean'`` gives the batch mean, ``'none'`` the per-sample vector. The
    per-sample MSE is the mean over output coordinates.

    Raises:
        DataError: A class label is outside ``[0, C)``.
    """
    features, labels = _unpack(spec, batch)
    tape, _, _ = record(spec, params, features)
    return tape, attach_loss(tape, spec, labels, reduction=reduction)


def per_sample_losses(spec: ModelSpec, params: ParameterVector, batch: Batch) -> Tensor:
    tape, node = supervised_loss(spec, params, batch, reduction="none")
    return tape.value(node).copy()


def predict(spec: ModelSpec, params: ParameterVector, features) -> Tensor:
    y, _ = forward(spec, params, features)
    return y


def evaluate(spec: ModelSpec, params: ParameterVector, dataset: DomainDataset) -> Dict[str, float]:
    """Mean loss (and accuracy for classifiers) of ``params`` on ``dataset``."""
    features, labels = _unpack(spec, dataset)
    tape, _, _ = record(spec, params, features)
    loss = attach_loss(tape, spec, labels, reduction="mean")
    metrics = {"loss": float(tape.value(loss))}
    if spec.head == "softmax-ce":
        predicted = np.argmax(tape.value(tape.output), axis=1)
        metrics["accuracy"] = float(np.mean(predicted == labels))
    return metrics
