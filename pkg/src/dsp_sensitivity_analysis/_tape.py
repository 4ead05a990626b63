"""Append-only computation tape and the differentiable operation registry.

Every operation knows three linear maps around its forward value:

* ``vjp``: the adjoint of one input given the output adjoint (reverse mode),
* ``jvp``: the output tangent given input tangents (forward mode),
* ``vjp_tangent``: the tangent of ``vjp`` along a direction, which is what
  forward-over-reverse Hessian-vector products need.

Operations that only support rows-independent parameter use also implement
``vjp_per_sample`` so per-example gradients can be read off one backward sweep.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Callable, Dict, Mapping, Optional, Tuple

import numpy as np

from ._errors import ContractError, DataError, DimensionError, NonFiniteError
from ._models import ParameterVector, Segment, Tensor

LEAF_KINDS = ("constant", "input", "parameter")


def unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _zeros_if_none(tangent: Optional[np.ndarray], like: np.ndarray) -> np.ndarray:
    return np.zeros_like(like, dtype=np.float64) if tangent is None else tangent


@dataclass
class Node:
    """One recorded value.

    Attributes:
        kind: Operation name, or a leaf kind (``constant``, ``input``, ``parameter``).
        inputs: Ids of the input nodes; always smaller than this node's id.
        value: Cached forward value.
        attrs: Operation attributes (labels, targets, reduction, layer label).
        requires_grad: True when an input or parameter leaf lies upstream.
    """

    kind: str
    inputs: Tuple[int, ...]
    value: np.ndarray
    attrs: Dict[str, Any] = field(default_factory=dict)
    requires_grad: bool = False


class Op:
    """Base class of differentiable operations."""

    name = ""
    twice_differentiable = True

    def forward(self, inputs: Tuple[np.ndarray, ...], attrs: Dict[str, Any]) -> np.ndarray:
        raise NotImplementedError

    def vjp(self, node: Node, grad: np.ndarray, inputs, index: int) -> np.ndarray:
        raise NotImplementedError

    def jvp(self, node: Node, inputs, tangents) -> np.ndarray:
        raise NotImplementedError

    def vjp_tangent(
        self, node: Node, grad: np.ndarray, grad_dot: np.ndarray, inputs, tangents, index: int
    ) -> np.ndarray:
        raise NotImplementedError

    def vjp_per_sample(self, node: Node, grad: np.ndarray, inputs, index: int) -> np.ndarray:
        raise ContractError(
            f"per-sample gradients are not available for parameters used by '{self.name}'"
        )


class MatMul(Op):
    """``a @ b`` or, with ``transpose_b``, ``a @ b.T`` for 2-D operands."""

    name = "matmul"

    @staticmethod
    def _right(b: np.ndarray, attrs: Mapping[str, Any]) -> np.ndarray:
        return b.T if attrs.get("transpose_b") else b

    def forward(self, inputs, attrs):
        a, b = inputs
        right = self._right(b, attrs)
        if a.ndim != 2 or right.ndim != 2 or a.shape[1] != right.shape[0]:
            label = attrs.get("label", self.name)
            raise DimensionError(
                f"{label}: cannot multiply {a.shape} by {right.shape}"
                + (" (transposed weight)" if attrs.get("transpose_b") else "")
            )
        return a @ right

    def vjp(self, node, grad, inputs, index):
        a, b = inputs
        if index == 0:
            return grad @ (b if node.attrs.get("transpose_b") else b.T)
        if node.attrs.get("transpose_b"):
            return grad.T @ a
        return a.T @ grad

    def jvp(self, node, inputs, tangents):
        a, b = inputs
        a_dot, b_dot = tangents
        out = np.zeros_like(node.value)
        if a_dot is not None:
            out = out + a_dot @ self._right(b, node.attrs)
        if b_dot is not None:
            out = out + a @ self._right(b_dot, node.attrs)
        return out

    def vjp_tangent(self, node, grad, grad_dot, inputs, tangents, index):
        a, b = inputs
        a_dot = _zeros_if_none(tangents[0], a)
        b_dot = _zeros_if_none(tangents[1], b)
        transpose_b = node.attrs.get("transpose_b")
        if index == 0:
            if transpose_b:
                return grad_dot @ b + grad @ b_dot
            return grad_dot @ b.T + grad @ b_dot.T
        if transpose_b:
            return grad_dot.T @ a + grad.T @ a_dot
        return a_dot.T @ grad + a.T @ grad_dot

    def vjp_per_sample(self, node, grad, inputs, index):
        if index != 1:
            return super().vjp_per_sample(node, grad, inputs, index)
        a = inputs[0]
        if node.attrs.get("transpose_b"):
            return np.einsum("no,ni->noi", grad, a)
        return np.einsum("ni,no->nio", a, grad)


class Add(Op):
    name = "add"

    def forward(self, inputs, attrs):
        a, b = inputs
        try:
            return a + b
        except ValueError as exc:
            label = attrs.get("label", self.name)
            raise DimensionError(f"{label}: cannot add {a.shape} and {b.shape}") from exc

    def vjp(self, node, grad, inputs, index):
        return unbroadcast(grad, inputs[index].shape)

    def jvp(self, node, inputs, tangents):
        out = np.zeros_like(node.value)
        for tangent in tangents:
            if tangent is not None:
                out = out + tangent
        return out

    def vjp_tangent(self, node, grad, grad_dot, inputs, tangents, index):
        return unbroadcast(grad_dot, inputs[index].shape)

    def vjp_per_sample(self, node, grad, inputs, index):
        if inputs[index].shape != grad.shape[1:]:
            return super().vjp_per_sample(node, grad, inputs, index)
        return grad.copy()


class Mul(Op):
    name = "mul"

    def forward(self, inputs, attrs):
        a, b = inputs
        try:
            return a * b
        except ValueError as exc:
            label = attrs.get("label", self.name)
            raise DimensionError(f"{label}: cannot multiply {a.shape} and {b.shape}") from exc

    def vjp(self, node, grad, inputs, index):
        other = inputs[1 - index]
        return unbroadcast(grad * other, inputs[index].shape)

    def jvp(self, node, inputs, tangents):
        a, b = inputs
        out = np.zeros_like(node.value)
        if tangents[0] is not None:
            out = out + tangents[0] * b
        if tangents[1] is not None:
            out = out + a * tangents[1]
        return out

    def vjp_tangent(self, node, grad, grad_dot, inputs, tangents, index):
        other = inputs[1 - index]
        other_dot = _zeros_if_none(tangents[1 - index], other)
        return unbroadcast(grad_dot * other + grad * other_dot, inputs[index].shape)

    def vjp_per_sample(self, node, grad, inputs, index):
        if inputs[index].shape != grad.shape[1:]:
            return super().vjp_per_sample(node, grad, inputs, index)
        return grad * inputs[1 - index]


class ReLU(Op):
    """``max(a, 0)`` with subgradient 0 at the kink."""

    name = "relu"
    twice_differentiable = False

    def forward(self, inputs, attrs):
        return np.maximum(inputs[0], 0.0)

    def vjp(self, node, grad, inputs, index):
        return grad * (inputs[0] > 0)

    def jvp(self, node, inputs, tangents):
        return _zeros_if_none(tangents[0], inputs[0]) * (inputs[0] > 0)

    def vjp_tangent(self, node, grad, grad_dot, inputs, tangents, index):
        return grad_dot * (inputs[0] > 0)


class Tanh(Op):
    name = "tanh"

    def forward(self, inputs, attrs):
        return np.tanh(inputs[0])

    def vjp(self, node, grad, inputs, index):
        return grad * (1.0 - node.value**2)

    def jvp(self, node, inputs, tangents):
        return (1.0 - node.value**2) * _zeros_if_none(tangents[0], inputs[0])

    def vjp_tangent(self, node, grad, grad_dot, inputs, tangents, index):
        y = node.value
        y_dot = (1.0 - y**2) * _zeros_if_none(tangents[0], inputs[0])
        return grad_dot * (1.0 - y**2) - 2.0 * grad * y * y_dot


class Scale(Op):
    name = "scale"

    def forward(self, inputs, attrs):
        return float(attrs["factor"]) * inputs[0]

    def vjp(self, node, grad, inputs, index):
        return float(node.attrs["factor"]) * grad

    def jvp(self, node, inputs, tangents):
        return float(node.attrs["factor"]) * _zeros_if_none(tangents[0], inputs[0])

    def vjp_tangent(self, node, grad, grad_dot, inputs, tangents, index):
        return float(node.attrs["factor"]) * grad_dot


class Sum(Op):
    name = "sum"

    def _divisor(self, a: np.ndarray) -> float:
        return 1.0

    def forward(self, inputs, attrs):
        return np.asarray(np.sum(inputs[0]) / self._divisor(inputs[0]), dtype=np.float64)

    def vjp(self, node, grad, inputs, index):
        return np.full(inputs[0].shape, float(grad) / self._divisor(inputs[0]))

    def jvp(self, node, inputs, tangents):
        tangent = _zeros_if_none(tangents[0], inputs[0])
        return np.asarray(np.sum(tangent) / self._divisor(inputs[0]), dtype=np.float64)

    def vjp_tangent(self, node, grad, grad_dot, inputs, tangents, index):
        return np.full(inputs[0].shape, float(grad_dot) / self._divisor(inputs[0]))


class Mean(Sum):
    name = "mean"

    def _divisor(self, a):
        return float(a.size)


def _reduce(per_sample: np.ndarray, reduction: str) -> np.ndarray:
    if reduction == "mean":
        return np.asarray(per_sample.mean(), dtype=np.float64)
    if reduction == "sum":
        return np.asarray(per_sample.sum(), dtype=np.float64)
    return per_sample


def _expand(grad: np.ndarray, reduction: str, n: int) -> np.ndarray:
    """Per-row weight that the reduction assigns to each sample's loss."""
    if reduction == "mean":
        return np.full((n, 1), float(grad) / n)
    if reduction == "sum":
        return np.full((n, 1), float(grad))
    return np.asarray(grad, dtype=np.float64).reshape(n, 1)


def _check_reduction(attrs: Mapping[str, Any]) -> str:
    reduction = attrs.get("reduction", "mean")
    if reduction not in ("mean", "sum", "none"):
        raise ContractError(f"unknown reduction '{reduction}'")
    return reduction


def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    return exp / exp.sum(axis=1, keepdims=True)


class SoftmaxCrossEntropy(Op):
    """Fused ``-log softmax(z)[y]`` per row, then reduced."""

    name = "softmax_cross_entropy"

    @staticmethod
    def _onehot(labels: np.ndarray, n_classes: int) -> np.ndarray:
        onehot = np.zeros((labels.shape[0], n_classes))
        onehot[np.arange(labels.shape[0]), labels] = 1.0
        return onehot

    def forward(self, inputs, attrs):
        z = inputs[0]
        labels = np.asarray(attrs["labels"], dtype=np.int64)
        _check_reduction(attrs)
        if z.ndim != 2 or labels.shape != (z.shape[0],):
            raise DimensionError(
                f"{attrs.get('label', self.name)}: logits {z.shape} do not match labels {labels.shape}"
            )
        if labels.size and (labels.min() < 0 or labels.max() >= z.shape[1]):
            raise DataError(f"class labels must lie in [0, {z.shape[1]})")
        shifted = z - z.max(axis=1, keepdims=True)
        log_norm = np.log(np.exp(shifted).sum(axis=1))
        per_sample = log_norm - shifted[np.arange(z.shape[0]), labels]
        return _reduce(per_sample, attrs.get("reduction", "mean"))

    def _residual(self, node, z):
        labels = np.asarray(node.attrs["labels"], dtype=np.int64)
        probs = softmax(z)
        return probs, probs - self._onehot(labels, z.shape[1])

    def vjp(self, node, grad, inputs, index):
        z = inputs[0]
        _, residual = self._residual(node, z)
        return _expand(grad, node.attrs.get("reduction", "mean"), z.shape[0]) * residual

    def jvp(self, node, inputs, tangents):
        z = inputs[0]
        z_dot = _zeros_if_none(tangents[0], z)
        _, residual = self._residual(node, z)
        return _reduce(np.sum(residual * z_dot, axis=1), node.attrs.get("reduction", "mean"))

    def vjp_tangent(self, node, grad, grad_dot, inputs, tangents, index):
        z = inputs[0]
        reduction = node.attrs.get("reduction", "mean")
        probs, residual = self._residual(node, z)
        z_dot = _zeros_if_none(tangents[0], z)
        probs_dot = probs * (z_dot - np.sum(probs * z_dot, axis=1, keepdims=True))
        n = z.shape[0]
        return _expand(grad_dot, reduction, n) * residual + _expand(grad, reduction, n) * probs_dot


class MeanSquaredError(Op):
    """Per-row mean over outputs of ``(f - target)**2``, then reduced."""

    name = "mse"

    def forward(self, inputs, attrs):
        f = inputs[0]
        target = np.asarray(attrs["target"], dtype=np.float64)
        _check_reduction(attrs)
        if f.ndim != 2 or target.shape != f.shape:
            raise DimensionError(
                f"{attrs.get('label', self.name)}: predictions {f.shape} do not match targets {target.shape}"
            )
        per_sample = np.mean((f - target) ** 2, axis=1)
        return _reduce(per_sample, attrs.get("reduction", "mean"))

    def vjp(self, node, grad, inputs, index):
        f = inputs[0]
        residual = f - node.attrs["target"]
        weight = _expand(grad, node.attrs.get("reduction", "mean"), f.shape[0])
        return weight * 2.0 * residual / f.shape[1]

    def jvp(self, node, inputs, tangents):
        f = inputs[0]
        f_dot = _zeros_if_none(tangents[0], f)
        residual = f - node.attrs["target"]
        per_sample = np.mean(2.0 * residual * f_dot, axis=1)
        return _reduce(per_sample, node.attrs.get("reduction", "mean"))

    def vjp_tangent(self, node, grad, grad_dot, inputs, tangents, index):
        f = inputs[0]
        reduction = node.attrs.get("reduction", "mean")
        n, width = f.shape
        residual = f - node.attrs["target"]
        f_dot = _zeros_if_none(tangents[0], f)
        return (
            _expand(grad_dot, reduction, n) * 2.0 * residual
            + _expand(grad, reduction, n) * 2.0 * f_dot
        ) / width


OPS: Dict[str, Op] = {
    op.name: op
    for op in (
        MatMul(),
        Add(),
        Mul(),
        ReLU(),
        Tanh(),
        Scale(),
        Sum(),
        Mean(),
        SoftmaxCrossEntropy(),
        MeanSquaredError(),
    )
}


class Tape:
    """Records one evaluation as a topologically ordered list of nodes.

    A tape is built once and then swept backward (or forward, for tangents) as many
    times as needed; it is not meant to be shared while it is being built.
    """

    def __init__(self) -> None:
        self.nodes: list[Node] = []
        self.parameters: Dict[str, int] = {}
        self.segments: Optional[Tuple[Segment, ...]] = None
        self.input_node: Optional[int] = None
        self.output: Optional[int] = None

    def __len__(self) -> int:
        return len(self.nodes)

    def value(self, node_id: int) -> np.ndarray:
        return self.nodes[node_id].value

    def _append(self, node: Node) -> int:
        self.nodes.append(node)
        return len(self.nodes) - 1

    # Leaves -------------------------------------------------------------------

    def constant(self, value) -> int:
        return self._append(Node("constant", (), np.asarray(value, dtype=np.float64)))

    def input(self, value) -> int:
        node_id = self._append(
            Node("input", (), np.asarray(value, dtype=np.float64), requires_grad=True)
        )
        self.input_node = node_id
        return node_id

    def parameter(self, name: str, value) -> int:
        if name in self.parameters:
            raise ContractError(f"parameter '{name}' is already on the tape")
        node_id = self._append(
            Node(
                "parameter",
                (),
                np.asarray(value, dtype=np.float64),
                attrs={"name": name},
                requires_grad=True,
            )
        )
        self.parameters[name] = node_id
        return node_id

    def bind(self, params: ParameterVector) -> Dict[str, int]:
        """Register every segment of ``params`` as a parameter leaf."""
        self.segments = params.segments
        return {
            seg.name: self.parameter(seg.name, params.view(seg.name)) for seg in params.segments
        }

    # Operations ---------------------------------------------------------------

    def apply(self, kind: str, *inputs: int, **attrs: Any) -> int:
        op = OPS.get(kind)
        if op is None:
            raise ContractError(f"unknown operation '{kind}'")
        for node_id in inputs:
            if not 0 <= node_id < len(self.nodes):
                raise ContractError(f"'{kind}' refers to node {node_id} not on the tape")
        values = tuple(self.nodes[i].value for i in inputs)
        value = np.asarray(op.forward(values, attrs), dtype=np.float64)
        if not np.all(np.isfinite(value)):
            raise NonFiniteError(f"{attrs.get('label', kind)} produced non-finite values")
        requires_grad = any(self.nodes[i].requires_grad for i in inputs)
        return self._append(Node(kind, tuple(inputs), value, dict(attrs), requires_grad))

    def matmul(self, a: int, b: int, *, transpose_b: bool = False, label: str = "matmul") -> int:
        return self.apply("matmul", a, b, transpose_b=transpose_b, label=label)

    def add(self, a: int, b: int, *, label: str = "add") -> int:
        return self.apply("add", a, b, label=label)

    def mul(self, a: int, b: int, *, label: str = "mul") -> int:
        return self.apply("mul", a, b, label=label)

    def relu(self, a: int) -> int:
        return self.apply("relu", a)

    def tanh(self, a: int) -> int:
        return self.apply("tanh", a)

    def scale(self, a: int, factor: float) -> int:
        return self.apply("scale", a, factor=float(factor))

    def sum(self, a: int) -> int:
        return self.apply("sum", a)

    def mean(self, a: int) -> int:
        return self.apply("mean", a)

    def softmax_cross_entropy(self, logits: int, labels, *, reduction: str = "mean") -> int:
        return self.apply(
            "softmax_cross_entropy",
            logits,
            labels=np.asarray(labels, dtype=np.int64),
            reduction=reduction,
        )

    def mse(self, predictions: int, target, *, reduction: str = "mean") -> int:
        return self.apply(
            "mse", predictions, target=np.asarray(target, dtype=np.float64), reduction=reduction
        )

    # Sweeps -------------------------------------------------------------------

    @property
    def twice_differentiable(self) -> bool:
        return all(
            OPS[node.kind].twice_differentiable
            for node in self.nodes
            if node.kind not in LEAF_KINDS and node.requires_grad
        )

    def _check_output(self, output: int) -> Node:
        if not 0 <= output < len(self.nodes):
            raise ContractError(f"node {output} is not on the tape")
        return self.nodes[output]

    def backward(
        self, output: int, seed: Optional[np.ndarray] = None, *, per_sample: bool = False
    ) -> Dict[int, np.ndarray]:
        """Propagate adjoints from ``output`` to the leaves.

        Args:
            output: Node to differentiate.
            seed: Adjoint of ``output``; defaults to ones (1.0 for a scalar).
            per_sample: Keep a leading row axis on parameter adjoints instead of summing
                over rows. Only valid when rows never interact upstream of ``output``.

        Returns:
            Adjoints of the ``input`` and ``parameter`` leaves reached by the sweep.
        """
        out_node = self._check_output(output)
        if seed is None:
            seed = np.ones_like(out_node.value)
        seed = np.asarray(seed, dtype=np.float64)
        if seed.shape != out_node.value.shape:
            raise ContractError(
                f"seed shape {seed.shape} does not match output shape {out_node.value.shape}"
            )

        adjoints: Dict[int, np.ndarray] = {output: seed}
        leaves: Dict[int, np.ndarray] = {}
        for node_id in range(output, -1, -1):
            grad = adjoints.pop(node_id, None)
            if grad is None:
                continue
            node = self.nodes[node_id]
            if node.kind in LEAF_KINDS:
                if node.kind != "constant":
                    leaves[node_id] = grad
                continue
            op = OPS[node.kind]
            values = tuple(self.nodes[i].value for i in node.inputs)
            for index, input_id in enumerate(node.inputs):
                source = self.nodes[input_id]
                if not source.requires_grad:
                    continue
                if per_sample and source.kind == "parameter":
                    contribution = op.vjp_per_sample(node, grad, values, index)
                else:
                    contribution = op.vjp(node, grad, values, index)
                if input_id in adjoints:
                    adjoints[input_id] = adjoints[input_id] + contribution
                else:
                    adjoints[input_id] = contribution
        return leaves

    def _tangents(self, output: int, seeds: Mapping[int, np.ndarray]) -> list:
        tangents: list = [None] * (output + 1)
        for node_id in range(output + 1):
            node = self.nodes[node_id]
            if node.kind in LEAF_KINDS:
                seed = seeds.get(node_id)
                if seed is not None:
                    seed = np.asarray(seed, dtype=np.float64)
                    if seed.shape != node.value.shape:
                        raise DimensionError(
                            f"tangent for node {node_id} has shape {seed.shape}, "
                            f"expected {node.value.shape}"
                        )
                tangents[node_id] = seed
                continue
            inputs = tuple(tangents[i] for i in node.inputs)
            if all(t is None for t in inputs):
                continue
            values = tuple(self.nodes[i].value for i in node.inputs)
            tangents[node_id] = OPS[node.kind].jvp(node, values, inputs)
        return tangents

    def jvp(self, output: int, seeds: Mapping[int, np.ndarray]) -> np.ndarray:
        """Forward-mode directional derivative of ``output`` along leaf tangents."""
        out_node = self._check_output(output)
        tangent = self._tangents(output, seeds)[output]
        return np.zeros_like(out_node.value) if tangent is None else tangent

    def hvp(
        self, output: int, seeds: Mapping[int, np.ndarray]
    ) -> Tuple[Dict[int, np.ndarray], Dict[int, np.ndarray]]:
        """Forward-over-reverse: gradient and its directional derivative.

        Returns:
            ``(gradients, hessian_vector_products)`` keyed by leaf node id.
        """
        out_node = self._check_output(output)
        if out_node.value.ndim != 0:
            raise ContractError("Hessian-vector products need a scalar output")
        tangents = self._tangents(output, seeds)

        adjoints: Dict[int, Tuple[np.ndarray, np.ndarray]] = {
            output: (np.ones_like(out_node.value), np.zeros_like(out_node.value))
        }
        grads: Dict[int, np.ndarray] = {}
        hvps: Dict[int, np.ndarray] = {}
        for node_id in range(output, -1, -1):
            pair = adjoints.pop(node_id, None)
            if pair is None:
                continue
            grad, grad_dot = pair
            node = self.nodes[node_id]
            if node.kind in LEAF_KINDS:
                if node.kind != "constant":
                    grads[node_id] = grad
                    hvps[node_id] = grad_dot
                continue
            op = OPS[node.kind]
            values = tuple(self.nodes[i].value for i in node.inputs)
            input_tangents = tuple(tangents[i] for i in node.inputs)
            for index, input_id in enumerate(node.inputs):
                if not self.nodes[input_id].requires_grad:
                    continue
                contribution = op.vjp(node, grad, values, index)
                contribution_dot = op.vjp_tangent(
                    node, grad, grad_dot, values, input_tangents, index
                )
                if input_id in adjoints:
                    old, old_dot = adjoints[input_id]
                    adjoints[input_id] = (old + contribution, old_dot + contribution_dot)
                else:
                    adjoints[input_id] = (contribution, contribution_dot)
        return grads, hvps

    # Flattening ---------------------------------------------------------------

    def flatten_parameters(
        self, leaf_values: Mapping[int, np.ndarray], *, rows: Optional[int] = None
    ) -> Tensor:
        """Concatenate per-parameter leaf arrays in registry order.

        Parameters never reached by the sweep contribute zeros. With ``rows`` set the
        leaf arrays carry a leading per-sample axis and the result is ``rows × d_θ``.
        """
        if self.segments is None:
            raise ContractError("the tape has no bound parameter vector")
        width = sum(seg.length for seg in self.segments)
        flat = np.zeros((width,) if rows is None else (rows, width))
        for seg in self.segments:
            node_id = self.parameters.get(seg.name)
            if node_id is None or node_id not in leaf_values:
                continue
            block = np.asarray(leaf_values[node_id], dtype=np.float64)
            if rows is None:
                flat[seg.offset : seg.stop] = block.reshape(-1)
            else:
                flat[:, seg.offset : seg.stop] = block.reshape(rows, -1)
        return flat

    def unflatten_parameters(self, vector) -> Dict[int, np.ndarray]:
        """Split a flat d_θ vector into per-parameter leaf tangents."""
        if self.segments is None:
            raise ContractError("the tape has no bound parameter vector")
        vector = np.asarray(vector, dtype=np.float64).reshape(-1)
        seeds: Dict[int, np.ndarray] = {}
        for seg in self.segments:
            node_id = self.parameters.get(seg.name)
            if node_id is not None:
                seeds[node_id] = vector[seg.offset : seg.stop].reshape(
                    self.nodes[node_id].value.shape
                )
        return seeds


TapeBuilder = Callable[[ParameterVector], Tuple[Tape, int]]
