"""Brute-force reference computations used by the validation suite and the tests.

None of these touch the tape: forward passes are plain numpy loops or batched
einsums, derivatives are central differences and covariances are Monte-Carlo
estimates. They are slow on purpose and never run inside training.
"""

from __future__ import annotations

from typing import Callable, Optional, Sequence, Tuple

import numpy as np
from scipy import stats

from ._errors import DimensionError
from ._models import DomainDataset, ModelSpec, ParameterVector, PerturbationSpec, Tensor

FD_STEP = 1e-5
RELATIVE_FLOOR = 1e-8
MC_CHUNK_ROWS = 20_000


def _activate(spec: ModelSpec, h: np.ndarray) -> np.ndarray:
    if spec.activation == "relu":
        return np.maximum(h, 0.0)
    if spec.activation == "tanh":
        return np.tanh(h)
    return h


def reference_forward(spec: ModelSpec, params: ParameterVector, x) -> Tensor:
    """Straight-line loop evaluation of ``f_θ(x)`` for one sample."""
    h = [float(v) for v in np.asarray(x, dtype=np.float64).reshape(-1)]
    for i in range(1, spec.n_layers + 1):
        weight = params.view(f"layer{i}.weight")
        bias = params.view(f"layer{i}.bias")
        out = []
        for row in range(weight.shape[0]):
            total = float(bias[row])
            for col in range(weight.shape[1]):
                total += float(weight[row, col]) * h[col]
            out.append(total)
        if i < spec.n_layers:
            out = [float(v) for v in _activate(spec, np.asarray(out))]
        h = out
    return np.asarray(h)


def reference_loss(spec: ModelSpec, params: ParameterVector, features, labels) -> float:
    """Mean supervised loss computed sample by sample with explicit log-softmax."""
    features = np.asarray(features, dtype=np.float64)
    total = 0.0
    for i in range(features.shape[0]):
        y = reference_forward(spec, params, features[i])
        if spec.head == "softmax-ce":
            shift = float(np.max(y))
            log_norm = shift + float(np.log(np.sum(np.exp(y - shift))))
            total += log_norm - float(y[int(labels[i])])
        else:
            target = np.asarray(labels[i], dtype=np.float64).reshape(-1)
            total += float(np.mean((y - target) ** 2))
    return total / features.shape[0]


def batched_forward(spec: ModelSpec, params: ParameterVector, thetas, features) -> Tensor:
    """Evaluate row i of ``features`` with parameter row i of ``thetas``."""
    thetas = np.atleast_2d(np.asarray(thetas, dtype=np.float64))
    h = np.atleast_2d(np.asarray(features, dtype=np.float64))
    for i in range(1, spec.n_layers + 1):
        w_seg = params.segment(f"layer{i}.weight")
        b_seg = params.segment(f"layer{i}.bias")
        weight = thetas[:, w_seg.offset : w_seg.stop].reshape((-1,) + w_seg.shape)
        bias = thetas[:, b_seg.offset : b_seg.stop]
        h = np.einsum("moi,mi->mo", weight, h) + bias
        if i < spec.n_layers:
            h = _activate(spec, h)
    return h


def fd_gradient(fun: Callable[[np.ndarray], float], z, h: float = FD_STEP) -> Tensor:
    """Central-difference gradient of a scalar function."""
    z = np.asarray(z, dtype=np.float64).reshape(-1)
    grad = np.zeros_like(z)
    for k in range(z.size):
        step = np.zeros_like(z)
        step[k] = h
        grad[k] = (fun(z + step) - fun(z - step)) / (2.0 * h)
    return grad


def fd_jacobian(fun: Callable[[np.ndarray], np.ndarray], z, h: float = FD_STEP) -> Tensor:
    """Central-difference Jacobian (``len(fun(z)) × len(z)``) of a vector function."""
    z = np.asarray(z, dtype=np.float64).reshape(-1)
    width = np.asarray(fun(z)).reshape(-1).size
    jac = np.zeros((width, z.size))
    for k in range(z.size):
        step = np.zeros_like(z)
        step[k] = h
        jac[:, k] = (
            np.asarray(fun(z + step)).reshape(-1) - np.asarray(fun(z - step)).reshape(-1)
        ) / (2.0 * h)
    return jac


def max_relative_error(actual, expected, floor: float = RELATIVE_FLOOR) -> float:
    """``max |a − b| / max(|a|, |b|, floor)`` elementwise."""
    actual = np.asarray(actual, dtype=np.float64)
    expected = np.asarray(expected, dtype=np.float64)
    if actual.size == 0:
        return 0.0
    scale = np.maximum(np.maximum(np.abs(actual), np.abs(expected)), floor)
    return float(np.max(np.abs(actual - expected) / scale))


def _sample_gaussian(rng: np.random.Generator, cov: np.ndarray, samples: int) -> np.ndarray:
    if cov.ndim == 1:
        return rng.standard_normal((samples, cov.size)) * np.sqrt(cov)
    return rng.multivariate_normal(np.zeros(cov.shape[0]), cov, size=samples, method="eigh")


def mc_output_covariance(
    spec: ModelSpec,
    params: ParameterVector,
    x0,
    perturbation: PerturbationSpec,
    *,
    seed: int = 0,
) -> Tuple[Tensor, Tensor]:
    """Monte-Carlo covariance of ``f(x0+δx; θ+δθ) − f(x0; θ)``.

    ``(δx, δθ)`` is drawn from ``perturbation`` at its scale, jointly when it carries
    a cross block, ``perturbation.samples`` times.

    Returns:
        ``(covariance, standard_error)``, both ``d_y × d_y``; the standard error is
        the per-entry sampling std of the covariance estimate.

    Raises:
        DimensionError: The perturbation does not match ``x0`` or the parameters.
    """
    rng = np.random.default_rng(seed)
    x0 = np.asarray(x0, dtype=np.float64).reshape(-1)
    d_x, d_theta = x0.size, params.size
    if (perturbation.input_dim, perturbation.param_dim) != (d_x, d_theta):
        raise DimensionError(
            f"perturbation covers {(perturbation.input_dim, perturbation.param_dim)} "
            f"(d_x, d_θ), model needs {(d_x, d_theta)}"
        )
    samples = perturbation.samples
    sigma_x, sigma_theta, cross = perturbation.covariances()
    joint = perturbation.joint_covariance() if cross is not None else None

    base = batched_forward(spec, params, params.values[None, :], x0[None, :])[0]
    deltas = []
    for start in range(0, samples, MC_CHUNK_ROWS):
        m = min(MC_CHUNK_ROWS, samples - start)
        if joint is not None:
            draw = _sample_gaussian(rng, joint, m)
            delta_x, delta_theta = draw[:, :d_x], draw[:, d_x:]
        else:
            delta_x = _sample_gaussian(rng, sigma_x, m)
            delta_theta = _sample_gaussian(rng, sigma_theta, m)
        outputs = batched_forward(spec, params, params.values + delta_theta, x0 + delta_x)
        deltas.append(outputs - base)
    delta_y = np.concatenate(deltas, axis=0)

    centered = delta_y - delta_y.mean(axis=0)
    products = np.einsum("mi,mj->mij", centered, centered)
    covariance = products.sum(axis=0) / (samples - 1)
    standard_error = products.std(axis=0) / np.sqrt(samples)
    return covariance, standard_error


def mc_parameter_variance(
    spec: ModelSpec,
    params: ParameterVector,
    x0,
    sigma_theta,
    *,
    samples: int = 200_000,
    seed: int = 0,
) -> float:
    """Sum over outputs of the Monte-Carlo variance of ``f(x0; θ+δθ)``."""
    d_x = np.asarray(x0).size
    perturbation = PerturbationSpec(np.zeros(d_x), sigma_theta, samples=samples)
    covariance, _ = mc_output_covariance(spec, params, x0, perturbation, seed=seed)
    return float(np.trace(covariance))


def mc_coordinate_sensitivity(
    spec: ModelSpec,
    params: ParameterVector,
    features,
    indices: Sequence[int],
    *,
    sigma: float = 1e-3,
    draws_per_point: int = 50,
    seed: int = 0,
) -> Tensor:
    """Perturb one θ_k at a time by ``N(0, σ²·Var(θ_k))`` and measure output variance.

    Every data point is evaluated ``draws_per_point`` times with independent draws;
    the per-point sample variance (summed over outputs) is averaged over points and
    divided by σ², which estimates s_k.
    """
    rng = np.random.default_rng(seed)
    features = np.atleast_2d(np.asarray(features, dtype=np.float64))
    n = features.shape[0]
    repeated = np.repeat(features, draws_per_point, axis=0)
    estimates = np.zeros(len(indices))
    for slot, k in enumerate(indices):
        std = sigma * np.sqrt(params.variances[k])
        thetas = np.repeat(params.values[None, :], repeated.shape[0], axis=0)
        thetas[:, k] += std * rng.standard_normal(repeated.shape[0])
        outputs = batched_forward(spec, params, thetas, repeated)
        outputs = outputs.reshape(n, draws_per_point, -1)
        per_point = outputs.var(axis=1, ddof=1).sum(axis=1)
        estimates[slot] = per_point.mean() / sigma**2
    return estimates


def second_moment_pvalues(domains: Sequence[DomainDataset], columns: Sequence[int]) -> Tensor:
    """Two-sided chi-square p-values of ``Σx²`` for columns assumed standard normal.

    Returns a ``D × len(columns)`` matrix.
    """
    pvalues = np.zeros((len(domains), len(columns)))
    for d, domain in enumerate(domains):
        n = domain.n_samples
        for c, column in enumerate(columns):
            statistic = float(np.sum(domain.features[:, column] ** 2))
            lower = stats.chi2.cdf(statistic, df=n)
            pvalues[d, c] = 2.0 * min(lower, 1.0 - lower)
    return pvalues


def spearman(a, b) -> float:
    result = stats.spearmanr(np.asarray(a).reshape(-1), np.asarray(b).reshape(-1))
    return float(result.statistic if hasattr(result, "statistic") else result.correlation)


def random_spd(rng: np.random.Generator, size: int, *, rank: Optional[int] = None) -> Tensor:
    """Random symmetric PSD matrix ``A Aᵀ / size`` (rank-deficient when ``rank`` is set)."""
    a = rng.standard_normal((size, rank or size))
    return a @ a.T / size
