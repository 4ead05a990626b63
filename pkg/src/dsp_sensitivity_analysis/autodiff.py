"""Reverse-mode differentiation of fully connected models.

The functions here build a :class:`~dsp_sensitivity_analysis._tape.Tape` for a
``ModelSpec`` and read gradients, Jacobians and Hessian-vector products off it.
Weights are stored ``out × in`` and a layer computes ``h @ W.T + b``.
"""

from __future__ import annotations

import logging
from typing import Dict, Iterator, Optional, Tuple

import numpy as np

from ._errors import CapabilityError, ContractError, DimensionError
from ._models import ModelSpec, ParameterVector, Tensor
from ._tape import Tape, TapeBuilder

logger = logging.getLogger(__name__)

MAX_DENSE_JACOBIAN_PARAMS = 100_000
HVP_METHODS = ("exact", "fd", "auto")


def check_parameters(spec: ModelSpec, params: ParameterVector) -> None:
    """Raise DimensionError unless ``params`` has the segment layout of ``spec``."""
    expected = spec.segment_shapes()
    if params.size != spec.n_params:
        raise DimensionError(
            f"model expects {spec.n_params} parameters, got {params.size}"
        )
    actual = [(seg.name, tuple(seg.shape)) for seg in params.segments]
    for (name, shape), (got_name, got_shape) in zip(expected, actual):
        if name != got_name or shape != got_shape:
            layer = name.split(".")[0]
            raise DimensionError(
                f"{layer}: expected segment {name} with shape {shape}, "
                f"got {got_name} with shape {got_shape}"
            )


def as_rows(spec: ModelSpec, x) -> Tuple[Tensor, bool]:
    """Return ``x`` as an ``n × d_x`` matrix and whether it was a single sample."""
    array = np.asarray(x, dtype=np.float64)
    single = array.ndim == 1
    rows = array.reshape(1, -1) if single else array
    if rows.ndim != 2 or rows.shape[1] != spec.input_dim:
        raise DimensionError(
            f"layer1: expected inputs with {spec.input_dim} features, got shape {array.shape}"
        )
    return rows, single


def build_network(tape: Tape, spec: ModelSpec, nodes: Dict[str, int], x_node: int) -> int:
    """Append the layers of ``spec`` to ``tape`` and return the output node."""
    h = x_node
    for i in range(1, spec.n_layers + 1):
        label = f"layer{i}"
        h = tape.matmul(h, nodes[f"{label}.weight"], transpose_b=True, label=label)
        h = tape.add(h, nodes[f"{label}.bias"], label=label)
        if i < spec.n_layers:
            if spec.activation == "relu":
                h = tape.relu(h)
            elif spec.activation == "tanh":
                h = tape.tanh(h)
    return h


def record(spec: ModelSpec, params: ParameterVector, x) -> Tuple[Tape, Tensor, bool]:
    """Build the tape of ``f_θ(x)``; returns ``(tape, rows, single)``."""
    check_parameters(spec, params)
    rows, single = as_rows(spec, x)
    tape = Tape()
    nodes = tape.bind(params)
    x_node = tape.input(rows)
    tape.output = build_network(tape, spec, nodes, x_node)
    return tape, rows, single


def forward(spec: ModelSpec, params: ParameterVector, x) -> Tuple[Tensor, Tape]:
    """Evaluate ``y = f_θ(x)`` for one sample (1-D) or a batch (``n × d_x``)."""
    tape, _, single = record(spec, params, x)
    y = tape.value(tape.output)
    return (y[0] if single else y).copy(), tape


def grad_params(tape: Tape, loss_node: int) -> Tensor:
    """Flat ``∂L/∂θ`` in registry order; parameters off the path get zeros."""
    value = tape.value(loss_node)
    if value.ndim != 0:
        raise ContractError(f"gradient needs a scalar loss, got shape {value.shape}")
    return tape.flatten_parameters(tape.backward(loss_node))


def per_sample_gradients(tape: Tape, loss_node: int) -> Tensor:
    """``n × d_θ`` gradients of an unreduced per-sample loss vector."""
    value = tape.value(loss_node)
    if value.ndim != 1:
        raise ContractError("per-sample gradients need a loss with reduction='none'")
    leaves = tape.backward(loss_node, np.ones_like(value), per_sample=True)
    return tape.flatten_parameters(leaves, rows=value.shape[0])


def seeded_parameter_gradients(tape: Tape, output: int, seed: np.ndarray) -> Tensor:
    """Per-sample ``seed_i · ∂f(x_i)/∂θ`` as an ``n × d_θ`` matrix."""
    seed = np.asarray(seed, dtype=np.float64)
    leaves = tape.backward(output, seed, per_sample=True)
    return tape.flatten_parameters(leaves, rows=seed.shape[0])


def _check_dense(params: ParameterVector) -> None:
    if params.size > MAX_DENSE_JACOBIAN_PARAMS:
        raise CapabilityError(
            f"dense Jacobians are limited to {MAX_DENSE_JACOBIAN_PARAMS} parameters "
            f"(model has {params.size}); use the loss-grad estimator instead"
        )


def iter_output_gradients(
    spec: ModelSpec, params: ParameterVector, x
) -> Iterator[Tuple[int, Tensor]]:
    """Yield ``(j, n × d_θ)`` per-sample gradients of output coordinate j.

    One forward pass is shared by the d_y backward sweeps.
    """
    tape, rows, _ = record(spec, params, x)
    n, width = rows.shape[0], spec.output_dim
    for j in range(width):
        seed = np.zeros((n, width))
        seed[:, j] = 1.0
        yield j, seeded_parameter_gradients(tape, tape.output, seed)


def jacobian_params(spec: ModelSpec, params: ParameterVector, x) -> Tensor:
    """``J_θ`` (``d_y × d_θ``) for one sample, or ``n × d_y × d_θ`` for a batch."""
    _check_dense(params)
    rows, single = as_rows(spec, x)
    jac = np.empty((rows.shape[0], spec.output_dim, params.size))
    for j, grads in iter_output_gradients(spec, params, rows):
        jac[:, j, :] = grads
    return jac[0] if single else jac


def jacobian_input(spec: ModelSpec, params: ParameterVector, x) -> Tensor:
    """``J_x`` (``d_y × d_x``) for one sample, or ``n × d_y × d_x`` for a batch."""
    tape, rows, single = record(spec, params, x)
    n, width = rows.shape[0], spec.output_dim
    jac = np.empty((n, width, spec.input_dim))
    for j in range(width):
        seed = np.zeros((n, width))
        seed[:, j] = 1.0
        leaves = tape.backward(tape.output, seed)
        jac[:, j, :] = leaves[tape.input_node]
    return jac[0] if single else jac


def directional_derivative(
    spec: ModelSpec, params: ParameterVector, x0, delta_x, delta_theta
) -> Tensor:
    """``J_x δx + J_θ δθ`` at ``(x0, θ)`` via one forward-mode sweep."""
    tape, rows, single = record(spec, params, x0)
    delta_x = np.asarray(delta_x, dtype=np.float64)
    delta_theta = np.asarray(delta_theta, dtype=np.float64).reshape(-1)
    if delta_x.shape != np.asarray(x0).shape:
        raise DimensionError(
            f"layer1: δx has shape {delta_x.shape}, expected {np.asarray(x0).shape}"
        )
    if delta_theta.size != params.size:
        raise DimensionError(f"δθ has length {delta_theta.size}, expected {params.size}")
    seeds = tape.unflatten_parameters(delta_theta)
    seeds[tape.input_node] = delta_x.reshape(rows.shape)
    out = tape.jvp(tape.output, seeds)
    return out[0] if single else out


def gradient(tape_builder: TapeBuilder, params: ParameterVector) -> Tensor:
    tape, loss = tape_builder(params)
    return grad_params(tape, loss)


def hvp(
    tape_builder: TapeBuilder,
    params: ParameterVector,
    v,
    *,
    method: str = "auto",
    fd_step: Optional[float] = None,
) -> Tensor:
    """Hessian-vector product ``∇²_θ L · v``.

    Args:
        tape_builder: Callable returning ``(tape, scalar loss node)`` for a parameter
            vector; called once for ``exact`` and twice for ``fd``.
        params: Evaluation point.
        v: Direction, length d_θ.
        method: ``exact`` (forward-over-reverse on the tape), ``fd`` (central
            difference of gradients) or ``auto`` (exact when every recorded operation
            is twice differentiable, otherwise fd).
        fd_step: Override for ε; defaults to ``1e-4·(1 + ‖θ‖∞)``.

    The ``exact`` method checks the recorded operations, not the evaluation point: a
    tape with any ReLU is rejected even when no pre-activation sits exactly at the kink.

    Raises:
        CapabilityError: ``exact`` was requested on a tape containing ReLU.
    """
    if method not in HVP_METHODS:
        raise ContractError(f"unknown HVP method '{method}', expected one of {HVP_METHODS}")
    v = np.asarray(v, dtype=np.float64).reshape(-1)
    if v.size != params.size:
        raise DimensionError(f"direction has length {v.size}, expected {params.size}")

    if method != "fd":
        tape, loss = tape_builder(params)
        if tape.twice_differentiable:
            _, hvps = tape.hvp(loss, tape.unflatten_parameters(v))
            return tape.flatten_parameters(hvps)
        if method == "exact":
            raise CapabilityError(
                "exact Hessian-vector products need a twice-differentiable model "
                "(ReLU is not); use the fd-hvp mode"
            )
        logger.debug("tape is not twice differentiable; falling back to finite differences")

    if not np.any(v):
        return np.zeros(params.size)
    theta = params.values
    eps = fd_step if fd_step is not None else 1e-4 * (1.0 + float(np.max(np.abs(theta), initial=0.0)))
    g_plus = gradient(tape_builder, params.with_values(theta + eps * v))
    g_minus = gradient(tape_builder, params.with_values(theta - eps * v))
    return (g_plus - g_minus) / (2.0 * eps)
