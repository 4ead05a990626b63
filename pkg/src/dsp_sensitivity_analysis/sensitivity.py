"""Covariance propagation and per-parameter sensitivity indices.

All estimators work on the first-order model ``δy ≈ J_x δx + J_θ δθ``. A parameter's
sensitivity is its variance times the mean squared norm of its Jacobian column; the
per-domain version restricts the mean to one domain and the cross-domain coefficient
of variation turns a ``d_θ × D`` sensitivity matrix into regularizer weights.
"""

from __future__ import annotations

import logging
from typing import Optional, Sequence, Tuple, Union

import numpy as np

from ._errors import (
    AnalysisIssue,
    CapabilityError,
    ContractError,
    DataError,
    DimensionError,
    ProtocolError,
    ValidationFailure,
)
from ._models import (
    DomainDataset,
    ModelSpec,
    ParameterVector,
    Segment,
    SensitivityReport,
    Tensor,
    check_covariance,
)
from ._tape import softmax
from .autodiff import (
    as_rows,
    directional_derivative,
    grad_params,
    iter_output_gradients,
    jacobian_params,
    per_sample_gradients,
    record,
    seeded_parameter_gradients,
)
from .models import supervised_loss

logger = logging.getLogger(__name__)

DEFAULT_EPSILON = 1e-8
ESTIMATOR_MODES = ("jacobian", "loss-grad", "loss-grad-batch")
CHUNK_ROWS = 1024
MAX_CONTAMINATION_PARAMS = 200
CONTAMINATION_TOLERANCE = 1e-10

Samples = Union[DomainDataset, np.ndarray]


def _features(samples: Samples) -> np.ndarray:
    if isinstance(samples, DomainDataset):
        return samples.features
    features = np.asarray(samples, dtype=np.float64)
    return features.reshape(1, -1) if features.ndim == 1 else features


def _variances(params: ParameterVector, variances) -> Tensor:
    if variances is None:
        return params.variances
    values = np.asarray(variances, dtype=np.float64).reshape(-1)
    if values.size != params.size:
        raise DimensionError(f"expected {params.size} variances, got {values.size}")
    if np.any(values < 0):
        raise DataError("parameter variances must be non-negative")
    return values


def linearized_delta_output(
    spec: ModelSpec, params: ParameterVector, x0, delta_x, delta_theta
) -> Tensor:
    """First-order output change ``J_x δx + J_θ δθ`` at ``(x0, θ)``."""
    return directional_derivative(spec, params, x0, delta_x, delta_theta)


def _as_matrix(cov: Tensor) -> Tensor:
    return np.diag(cov) if cov.ndim == 1 else cov


def propagate_covariance(
    j_x,
    j_theta,
    sigma_x,
    sigma_theta,
    sigma_x_theta=None,
) -> Tensor:
    """Output covariance under centered perturbations of inputs and parameters.

    Returns ``J_x Σ_x J_xᵀ + J_θ Σ_θ J_θᵀ``, plus ``J_x Σ_xθ J_θᵀ + (·)ᵀ`` when a
    cross-covariance block is given. Σ arguments may be diagonals or full matrices.

    Raises:
        DataError: A Σ has a negative diagonal entry or is not symmetric.
        DimensionError: Jacobians and covariances disagree in shape.
    """
    j_x = np.atleast_2d(np.asarray(j_x, dtype=np.float64))
    j_theta = np.atleast_2d(np.asarray(j_theta, dtype=np.float64))
    sigma_x = check_covariance(sigma_x, "sigma_x")
    sigma_theta = check_covariance(sigma_theta, "sigma_theta")
    if j_x.shape[0] != j_theta.shape[0]:
        raise DimensionError(f"J_x has {j_x.shape[0]} rows but J_θ has {j_theta.shape[0]}")
    if sigma_x.shape[0] != j_x.shape[1]:
        raise DimensionError(f"Σ_x is {sigma_x.shape}, J_x has {j_x.shape[1]} columns")
    if sigma_theta.shape[0] != j_theta.shape[1]:
        raise DimensionError(
            f"Σ_θ is {sigma_theta.shape}, J_θ has {j_theta.shape[1]} columns"
        )

    if sigma_x.ndim == 1:
        cov = (j_x * sigma_x) @ j_x.T
    else:
        cov = j_x @ sigma_x @ j_x.T
    if sigma_theta.ndim == 1:
        cov = cov + (j_theta * sigma_theta) @ j_theta.T
    else:
        cov = cov + j_theta @ sigma_theta @ j_theta.T
    if sigma_x_theta is not None:
        cross = np.asarray(sigma_x_theta, dtype=np.float64)
        if cross.shape != (j_x.shape[1], j_theta.shape[1]):
            raise DimensionError(
                f"Σ_xθ is {cross.shape}, expected {(j_x.shape[1], j_theta.shape[1])}"
            )
        mixed = j_x @ cross @ j_theta.T
        cov = cov + mixed + mixed.T
    return 0.5 * (cov + cov.T)


def param_covariance_decomposition(j_theta, variances) -> Tensor:
    """Accumulate ``Σ_k Var(θ_k) j_k j_kᵀ`` one rank-1 term at a time."""
    j_theta = np.atleast_2d(np.asarray(j_theta, dtype=np.float64))
    variances = check_covariance(variances, "variances")
    if variances.ndim != 1:
        raise ContractError("the rank-1 decomposition needs a diagonal Σ_θ")
    if variances.size != j_theta.shape[1]:
        raise DimensionError(
            f"{variances.size} variances for a Jacobian with {j_theta.shape[1]} columns"
        )
    out = np.zeros((j_theta.shape[0], j_theta.shape[0]))
    for k in np.flatnonzero(variances):
        column = j_theta[:, k]
        out += variances[k] * np.outer(column, column)
    return out


def local_contribution(
    spec: ModelSpec, params: ParameterVector, x, variances=None
) -> Tensor:
    """``δv_k(x) = Var(θ_k)·‖j_k(x)‖²`` for a single sample."""
    variances = _variances(params, variances)
    jac = jacobian_params(spec, params, np.asarray(x, dtype=np.float64).reshape(-1))
    return variances * np.sum(jac**2, axis=0)


def total_output_variance(
    spec: ModelSpec, params: ParameterVector, x, variances=None
) -> float:
    """``Tr(J_θ Σ_θ J_θᵀ)`` at one sample."""
    return float(np.sum(local_contribution(spec, params, x, variances)))


def jacobian_energy(
    spec: ModelSpec, params: ParameterVector, samples: Samples, *, chunk_rows: int = CHUNK_ROWS
) -> Tensor:
    """Mean over samples of ``‖j_k(x)‖²`` per parameter (variance-free part of s_k)."""
    features = _features(samples)
    if features.shape[0] == 0:
        raise DataError("sensitivity needs at least one sample")
    as_rows(spec, features)
    total = np.zeros(params.size)
    for start in range(0, features.shape[0], chunk_rows):
        chunk = features[start : start + chunk_rows]
        for _, grads in iter_output_gradients(spec, params, chunk):
            total += np.sum(grads**2, axis=0)
    return total / features.shape[0]


def sensitivity_index(
    spec: ModelSpec, params: ParameterVector, samples: Samples, variances=None
) -> Tensor:
    """``s_k = Var(θ_k)·E_x‖∂_{θ_k} f_θ(x)‖²`` over ``samples``.

    Raises:
        DataError: ``samples`` is empty.
    """
    variances = _variances(params, variances)
    return variances * jacobian_energy(spec, params, samples)


def loss_gradient_energy(
    spec: ModelSpec,
    params: ParameterVector,
    dataset: DomainDataset,
    *,
    per_sample: bool = True,
    chunk_rows: int = CHUNK_ROWS,
) -> Tensor:
    """Mean squared per-sample loss gradient, or the squared batch-mean gradient."""
    if not per_sample:
        tape, loss = supervised_loss(spec, params, dataset)
        return grad_params(tape, loss) ** 2
    total = np.zeros(params.size)
    for start in range(0, dataset.n_samples, chunk_rows):
        chunk = dataset.subset(np.arange(start, min(start + chunk_rows, dataset.n_samples)))
        tape, losses = supervised_loss(spec, params, chunk, reduction="none")
        total += np.sum(per_sample_gradients(tape, losses) ** 2, axis=0)
    return total / dataset.n_samples


def empirical_fisher_diagonal(
    spec: ModelSpec, params: ParameterVector, dataset: DomainDataset
) -> Tensor:
    """Mean squared score ``(∂_{θ_k} log p_θ(y|x))²`` over ``dataset``.

    The score is ``(onehot(y) − softmax(z))·∂z`` for the softmax head and
    ``(y − f)/σ²·∂f`` for the Gaussian regression head.

    Raises:
        CapabilityError: The regression head has no declared noise scale.
    """
    if spec.head == "mse" and spec.noise_scale is None:
        raise CapabilityError(
            "Fisher information of the mse head needs model.noise_scale (Gaussian σ)"
        )
    total = np.zeros(params.size)
    for start in range(0, dataset.n_samples, CHUNK_ROWS):
        chunk = dataset.subset(np.arange(start, min(start + CHUNK_ROWS, dataset.n_samples)))
        tape, _, _ = record(spec, params, chunk.features)
        outputs = tape.value(tape.output)
        if spec.head == "softmax-ce":
            if not chunk.is_classification:
                raise DataError("softmax-ce head needs integer class labels")
            onehot = np.zeros_like(outputs)
            onehot[np.arange(chunk.n_samples), chunk.labels] = 1.0
            seed = onehot - softmax(outputs)
        else:
            if chunk.is_classification:
                raise DataError("mse head needs real-valued targets")
            seed = (chunk.labels - outputs) / spec.noise_scale**2
        scores = seeded_parameter_gradients(tape, tape.output, seed)
        total += np.sum(scores**2, axis=0)
    return total / dataset.n_samples


def per_domain_sensitivity(
    spec: ModelSpec,
    params: ParameterVector,
    domain_batches: Sequence[DomainDataset],
    variances=None,
    mode: str = "jacobian",
) -> Tensor:
    """Sensitivity of every parameter in every domain, as a ``d_θ × D`` matrix.

    Modes:
        ``jacobian``: column d is :func:`sensitivity_index` over domain d.
        ``loss-grad``: Var(θ_k) times the mean squared per-sample loss gradient.
        ``loss-grad-batch``: Var(θ_k) times the squared mini-batch mean gradient.

    Raises:
        ProtocolError: Fewer than two domains.
    """
    if mode not in ESTIMATOR_MODES:
        raise ContractError(f"unknown estimator mode '{mode}', expected one of {ESTIMATOR_MODES}")
    if len(domain_batches) < 2:
        raise ProtocolError(
            f"per-domain sensitivity needs at least two domains, got {len(domain_batches)}"
        )
    variances = _variances(params, variances)
    columns = []
    for batch in domain_batches:
        if mode == "jacobian":
            energy = jacobian_energy(spec, params, batch)
        else:
            energy = loss_gradient_energy(
                spec, params, batch, per_sample=(mode == "loss-grad")
            )
        columns.append(variances * energy)
    return np.stack(columns, axis=1)


def cross_domain_stats(
    per_domain,
    epsilon: float = DEFAULT_EPSILON,
    *,
    mode: str = "jacobian",
    segments: Sequence[Segment] = (),
    domain_ids: Sequence[str] = (),
) -> SensitivityReport:
    """Mean, population variance and coefficient of variation across domains.

    ``c_k = sqrt(v_k)/(s̄_k + ε)``; rows with ``s̄_k + ε == 0`` get ``c_k = 0``.
    """
    matrix = np.asarray(per_domain, dtype=np.float64)
    if matrix.ndim != 2:
        raise DimensionError(f"expected a d_θ × D matrix, got shape {matrix.shape}")
    if matrix.shape[1] < 2:
        raise ProtocolError("cross-domain statistics need at least two domains")
    if epsilon < 0:
        raise ContractError("epsilon must be non-negative")
    if np.any(matrix < 0) or not np.all(np.isfinite(matrix)):
        raise DataError("sensitivities must be finite and non-negative")

    mean = matrix.mean(axis=1)
    variance = np.mean((matrix - mean[:, None]) ** 2, axis=1)
    denominator = mean + epsilon
    cv = np.zeros_like(mean)
    live = denominator > 0
    cv[live] = np.sqrt(variance[live]) / denominator[live]

    issues = []
    dead = np.flatnonzero(mean == 0)
    if dead.size:
        issues.append(
            AnalysisIssue(
                code="dead_parameters",
                message=f"{dead.size} parameters have zero sensitivity in every domain",
                context={"count": int(dead.size), "first": int(dead[0])},
            )
        )
    return SensitivityReport(
        per_domain=matrix,
        mean=mean,
        variance=variance,
        cv=cv,
        epsilon=float(epsilon),
        mode=mode,
        segments=tuple(segments),
        domain_ids=tuple(str(d) for d in domain_ids),
        issues=tuple(issues),
    )


def domain_report(
    spec: ModelSpec,
    params: ParameterVector,
    domain_batches: Sequence[DomainDataset],
    *,
    variances=None,
    mode: str = "jacobian",
    epsilon: float = DEFAULT_EPSILON,
) -> SensitivityReport:
    """Per-domain sensitivities of ``params`` summarized as a report."""
    matrix = per_domain_sensitivity(spec, params, domain_batches, variances, mode)
    return cross_domain_stats(
        matrix,
        epsilon,
        mode=mode,
        segments=params.segments,
        domain_ids=[batch.domain_id for batch in domain_batches],
    )


def rank_by_dispersion(report: SensitivityReport) -> np.ndarray:
    """Parameter indices by descending c_k; ties keep flat-index order."""
    return np.argsort(-report.cv, kind="stable")


def contamination_bound_check(
    spec: ModelSpec, params: ParameterVector, samples: Samples, sigma_theta
) -> Tuple[Tensor, Tensor]:
    """Off-diagonal contamination of each parameter's sensitivity under a full Σ_θ.

    For the Gram matrix ``G = E[J_θᵀ J_θ]`` the k-th contribution under a full
    covariance is ``Σ_ℓ Σ_kℓ G_kℓ``. Returns ``(lhs, rhs)`` with
    ``lhs_k = |Σ_ℓ Σ_kℓ G_kℓ − Σ_kk G_kk|`` and
    ``rhs_k = Σ_{ℓ≠k} |Σ_kℓ|·E|⟨j_k, j_ℓ⟩|``.

    Raises:
        ValidationFailure: Some ``lhs_k`` exceeds ``rhs_k`` by more than
            ``CONTAMINATION_TOLERANCE`` (relative to ``max(1, rhs_k)``).
        DataError: Σ_θ is not a symmetric matrix with a non-negative diagonal.
        ContractError: The model has more than 200 parameters.
    """
    sigma = check_covariance(sigma_theta, "sigma_theta")
    if sigma.ndim != 2:
        raise DataError("the contamination bound needs a full Σ_θ matrix")
    if params.size > MAX_CONTAMINATION_PARAMS:
        raise ContractError(
            f"the contamination bound is limited to {MAX_CONTAMINATION_PARAMS} parameters"
        )
    if sigma.shape[0] != params.size:
        raise DimensionError(f"Σ_θ is {sigma.shape}, model has {params.size} parameters")

    jac = jacobian_params(spec, params, _features(samples))
    inner = np.einsum("nyk,nyl->nkl", jac, jac)
    gram = inner.mean(axis=0)
    abs_gram = np.abs(inner).mean(axis=0)

    off_diagonal = sigma - np.diag(np.diag(sigma))
    lhs = np.abs(np.sum(off_diagonal * gram, axis=1))
    rhs = np.sum(np.abs(off_diagonal) * abs_gram, axis=1)
    _enforce_contamination_bound(lhs, rhs)
    return lhs, rhs


def _enforce_contamination_bound(lhs: Tensor, rhs: Tensor) -> None:
    excess = lhs - rhs - CONTAMINATION_TOLERANCE * np.maximum(1.0, rhs)
    broken = np.flatnonzero(excess > 0)
    if broken.size:
        worst = int(broken[np.argmax(excess[broken])])
        raise ValidationFailure(
            f"contamination bound violated for {broken.size} parameter(s); "
            f"worst k={worst}: {lhs[worst]:.6g} > {rhs[worst]:.6g}"
        )
