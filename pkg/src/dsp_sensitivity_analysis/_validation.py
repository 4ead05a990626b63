"""Oracle suite behind ``dsp-reg validate``.

Every check compares a closed-form quantity against a brute-force reference from
:mod:`._oracles` on freshly drawn random models and reports the worst error it saw.
"""

from __future__ import annotations

import logging
import time
from typing import Any, Callable, Dict, List, Sequence, Tuple

import numpy as np

from ._config import CHECK_NAMES, ValidationConfig
from ._errors import ValidationFailure
from ._models import (
    ACTIVATIONS,
    CheckResult,
    DomainDataset,
    ModelSpec,
    ParameterVector,
    PerturbationSpec,
    SyntheticSpec,
    TrainConfig,
)
from ._oracles import (
    batched_forward,
    fd_gradient,
    fd_jacobian,
    max_relative_error,
    mc_coordinate_sensitivity,
    mc_output_covariance,
    random_spd,
    reference_forward,
    reference_loss,
    spearman,
)
from ._persistence import write_json
from ._tape import softmax
from .autodiff import grad_params, jacobian_input, jacobian_params
from .domain_data import generate
from .models import init_params, predict, supervised_loss
from .sensitivity import (
    contamination_bound_check,
    domain_report,
    empirical_fisher_diagonal,
    jacobian_energy,
    linearized_delta_output,
    local_contribution,
    loss_gradient_energy,
    param_covariance_decomposition,
    propagate_covariance,
    rank_by_dispersion,
    sensitivity_index,
    total_output_variance,
)
from .trainer import train

logger = logging.getLogger(__name__)

CHECK_TIME_LIMIT = 60.0
GRADIENT_TOLERANCE = 1e-5
GRADIENT_FLOOR_SHARE = 1e-3
COVARIANCE_TOLERANCE = 0.02
IDENTITY_TOLERANCE = 1e-10
SENSITIVITY_TOLERANCE = 0.05
SPEARMAN_THRESHOLD = 0.9
INVARIANT_CV_LIMIT = 0.05
SPURIOUS_CV_FLOOR = 0.5
KINK_MARGIN = 1e-3
MAX_REDRAWS = 1000

Outcome = Tuple[bool, float, float, Dict[str, Any]]


# Random models ---------------------------------------------------------------


def _random_model(
    rng: np.random.Generator,
    *,
    activation: str = "",
    head: str = "",
    max_depth: int = 3,
    max_width: int = 32,
) -> Tuple[ModelSpec, ParameterVector]:
    depth = int(rng.integers(1, max_depth + 1))
    head = head or ("softmax-ce" if rng.random() < 0.5 else "mse")
    d_x = int(rng.integers(1, 9))
    d_y = int(rng.integers(2, 5)) if head == "softmax-ce" else int(rng.integers(1, 5))
    hidden = [int(rng.integers(1, max_width + 1)) for _ in range(depth - 1)]
    spec = ModelSpec(
        layer_sizes=(d_x, *hidden, d_y),
        activation=activation or str(rng.choice(ACTIVATIONS)),
        head=head,
        init_seed=int(rng.integers(2**31)),
    )
    params = init_params(spec)
    return spec, params.with_values(params.values + 0.1 * rng.standard_normal(params.size))


def _min_abs_preactivation(spec: ModelSpec, params: ParameterVector, x: np.ndarray) -> float:
    h = x
    smallest = np.inf
    for i in range(1, spec.n_layers):
        pre = params.view(f"layer{i}.weight") @ h + params.view(f"layer{i}.bias")
        smallest = min(smallest, float(np.min(np.abs(pre))))
        h = np.maximum(pre, 0.0)
    return smallest


def _draw_inputs(
    rng: np.random.Generator, spec: ModelSpec, params: ParameterVector, n: int
) -> np.ndarray:
    """Standard normal inputs; ReLU models redraw rows that sit near a kink."""
    rows = []
    for _ in range(n):
        x = rng.standard_normal(spec.input_dim)
        if spec.activation == "relu":
            for _ in range(MAX_REDRAWS):
                if _min_abs_preactivation(spec, params, x) >= KINK_MARGIN:
                    break
                x = rng.standard_normal(spec.input_dim)
        rows.append(x)
    return np.asarray(rows)


def _random_labels(rng: np.random.Generator, spec: ModelSpec, n: int) -> np.ndarray:
    if spec.head == "softmax-ce":
        return rng.integers(0, spec.output_dim, size=n)
    return rng.standard_normal((n, spec.output_dim))


def _loss_at(spec: ModelSpec, params: ParameterVector, theta, features, labels) -> float:
    n = features.shape[0]
    outputs = batched_forward(spec, params, np.repeat(theta[None, :], n, axis=0), features)
    if spec.head == "softmax-ce":
        shift = outputs.max(axis=1, keepdims=True)
        log_norm = shift[:, 0] + np.log(np.exp(outputs - shift).sum(axis=1))
        return float(np.mean(log_norm - outputs[np.arange(n), labels]))
    return float(np.mean((outputs - labels) ** 2))


def _gradient_error(actual, expected) -> float:
    floor = max(1e-8, GRADIENT_FLOOR_SHARE * float(np.max(np.abs(expected), initial=0.0)))
    return max_relative_error(actual, expected, floor=floor)


# Checks ----------------------------------------------------------------------


def check_gradients(config: ValidationConfig, rng: np.random.Generator) -> Outcome:
    """Loss gradient, J_θ and J_x against central differences."""
    worst = {"loss": 0.0, "grad": 0.0, "jacobian_params": 0.0, "jacobian_input": 0.0}
    for _ in range(config.gradient_trials):
        spec, params = _random_model(rng)
        features = _draw_inputs(rng, spec, params, 3)
        labels = _random_labels(rng, spec, 3)

        tape, loss = supervised_loss(spec, params, (features, labels))
        grad = grad_params(tape, loss)
        if config.fault_injection == "gradient":
            grad = grad.copy()
            grad[0] += 1e-3 * max(1.0, abs(grad[0]))
        expected = fd_gradient(lambda t: _loss_at(spec, params, t, features, labels), params.values)
        worst["grad"] = max(worst["grad"], _gradient_error(grad, expected))
        reference = reference_loss(spec, params, features, labels)
        worst["loss"] = max(worst["loss"], max_relative_error(tape.value(loss), reference))

        x = features[0]
        j_theta = jacobian_params(spec, params, x)
        fd_theta = fd_jacobian(
            lambda t: batched_forward(spec, params, t[None, :], x[None, :])[0], params.values
        )
        worst["jacobian_params"] = max(worst["jacobian_params"], _gradient_error(j_theta, fd_theta))
        j_x = jacobian_input(spec, params, x)
        fd_x = fd_jacobian(lambda z: reference_forward(spec, params, z), x)
        worst["jacobian_input"] = max(worst["jacobian_input"], _gradient_error(j_x, fd_x))

    measured = max(worst.values())
    return measured < GRADIENT_TOLERANCE, measured, GRADIENT_TOLERANCE, worst


def check_covariance(config: ValidationConfig, rng: np.random.Generator) -> Outcome:
    """Propagated output covariance against Monte-Carlo perturbation of tanh MLPs.

    The last trial draws a full joint covariance with an input/parameter cross block.
    """
    errors = []
    for trial in range(config.covariance_trials):
        spec, params = _random_model(rng, activation="tanh", head="mse", max_width=16)
        x0 = rng.standard_normal(spec.input_dim)
        d_x = spec.input_dim
        if trial == config.covariance_trials - 1 and config.covariance_trials > 1:
            full = random_spd(rng, d_x + params.size)
            shape = dict(
                input_cov=full[:d_x, :d_x], param_cov=full[d_x:, d_x:], cross_cov=full[:d_x, d_x:]
            )
        else:
            rms = float(np.sqrt(np.mean(params.values**2)))
            shape = dict(input_cov=np.ones(d_x), param_cov=np.full(params.size, rms**2))
        perturbation = PerturbationSpec(
            **shape, samples=config.mc_samples, scale=config.perturbation_scale
        )
        analytic = propagate_covariance(
            jacobian_input(spec, params, x0),
            jacobian_params(spec, params, x0),
            *perturbation.covariances(),
        )
        sampled, _ = mc_output_covariance(
            spec, params, x0, perturbation, seed=int(rng.integers(2**31))
        )
        errors.append(abs(np.trace(analytic) - np.trace(sampled)) / np.trace(sampled))
    measured = float(max(errors, default=0.0))
    return measured < COVARIANCE_TOLERANCE, measured, COVARIANCE_TOLERANCE, {
        "trace_errors": [float(e) for e in errors]
    }


def check_decomposition(config: ValidationConfig, rng: np.random.Generator) -> Outcome:
    """Rank-1 sum against the dense product, contributions against the trace."""
    worst = {"rank1": 0.0, "trace": 0.0, "total": 0.0, "linearized": 0.0}
    for _ in range(config.decomposition_trials):
        spec, params = _random_model(rng, max_width=16)
        x = _draw_inputs(rng, spec, params, 1)[0]
        variances = rng.uniform(0.0, 2.0, params.size)
        variances[rng.random(params.size) < 0.1] = 0.0
        j_theta = jacobian_params(spec, params, x)
        j_x = jacobian_input(spec, params, x)

        dense = propagate_covariance(j_x, j_theta, np.zeros(spec.input_dim), variances)
        scale = max(1.0, float(np.max(np.abs(dense))))
        rank1 = param_covariance_decomposition(j_theta, variances)
        worst["rank1"] = max(worst["rank1"], float(np.max(np.abs(rank1 - dense))) / scale)
        trace = float(np.trace(dense))
        contributions = local_contribution(spec, params, x, variances)
        worst["trace"] = max(worst["trace"], abs(contributions.sum() - trace) / max(1.0, trace))
        total = total_output_variance(spec, params, x, variances)
        worst["total"] = max(worst["total"], abs(total - trace) / max(1.0, trace))

        delta_x = rng.standard_normal(spec.input_dim)
        delta_theta = rng.standard_normal(params.size)
        linear = linearized_delta_output(spec, params, x, delta_x, delta_theta)
        expected = j_x @ delta_x + j_theta @ delta_theta
        worst["linearized"] = max(
            worst["linearized"],
            float(np.max(np.abs(linear - expected))) / max(1.0, float(np.max(np.abs(expected)))),
        )
    measured = max(worst.values())
    return measured < IDENTITY_TOLERANCE, measured, IDENTITY_TOLERANCE, worst


def check_sensitivity_index(config: ValidationConfig, rng: np.random.Generator) -> Outcome:
    """Per-coordinate perturbation of a trained classifier against s_k."""
    seed = int(rng.integers(2**31))
    domains = generate(
        SyntheticSpec(samples_per_domain=400, label_noise=0.1, leak_strengths=(1.0, 0.5, 0.0), seed=seed)
    )
    spec = ModelSpec(layer_sizes=(domains[0].n_features, 16, 2), activation="tanh", init_seed=seed)
    params, _ = train(TrainConfig(model=spec, lam=0.0, epochs=3, learning_rate=0.1, seed=seed), domains)

    points = np.vstack([d.features[:200] for d in domains])
    s = sensitivity_index(spec, params, points)
    top = np.argsort(-s, kind="stable")[:10]
    sampled = mc_coordinate_sensitivity(
        spec,
        params,
        points,
        top,
        sigma=config.perturbation_scale,
        draws_per_point=100,
        seed=int(rng.integers(2**31)),
    )
    errors = np.abs(sampled - s[top]) / s[top]
    measured = float(np.max(errors))
    return measured < SENSITIVITY_TOLERANCE, measured, SENSITIVITY_TOLERANCE, {
        "parameters": [int(k) for k in top]
    }


def check_fisher(config: ValidationConfig, rng: np.random.Generator) -> Outcome:
    """s_k against Var(θ_k)·I_kk.

    A single sample with a scalar Gaussian output has score factor T = r/σ², so
    s_k·T² must equal Var(θ_k)·I_kk exactly;
    random classifiers with labels drawn from their own predictions must agree in rank.
    """
    noise_scale, residual = 0.5, 3.0
    spec = ModelSpec(
        layer_sizes=(3, 5, 1), activation="tanh", head="mse", noise_scale=noise_scale
    )
    params = init_params(spec)
    params = params.with_variances(rng.uniform(0.5, 2.0, params.size))
    x0 = rng.standard_normal((1, 3))
    single = DomainDataset("0", x0, predict(spec, params, x0) + residual)
    scaled = sensitivity_index(spec, params, x0) * (residual / noise_scale**2) ** 2
    fisher = params.variances * empirical_fisher_diagonal(spec, params, single)
    exact_error = max_relative_error(
        scaled, fisher, floor=1e-12 * max(1.0, float(np.max(scaled)))
    )

    correlations = []
    score_error = 0.0
    for _ in range(3):
        spec = ModelSpec(
            layer_sizes=(5, 16, 3), activation="tanh", init_seed=int(rng.integers(2**31))
        )
        params = init_params(spec)
        features = rng.standard_normal((2000, 5))
        probabilities = softmax(predict(spec, params, features))
        u = rng.random(features.shape[0])
        labels = np.minimum((probabilities.cumsum(axis=1) < u[:, None]).sum(axis=1), 2)
        dataset = DomainDataset("0", features, labels, n_classes=3)
        fisher = empirical_fisher_diagonal(spec, params, dataset)
        correlations.append(
            spearman(sensitivity_index(spec, params, dataset), params.variances * fisher)
        )
        # The cross-entropy gradient is minus the score, so the squares coincide.
        score_error = max(
            score_error, max_relative_error(loss_gradient_energy(spec, params, dataset), fisher)
        )

    rho = float(min(correlations))
    passed = (
        exact_error < IDENTITY_TOLERANCE
        and score_error < IDENTITY_TOLERANCE
        and rho >= SPEARMAN_THRESHOLD
    )
    return passed, rho, SPEARMAN_THRESHOLD, {
        "exact_error": exact_error,
        "score_error": score_error,
        "spearman": [float(r) for r in correlations],
    }


def check_separation(config: ValidationConfig, rng: np.random.Generator) -> Outcome:
    """Invariant-feature weights keep c_k near zero, spurious-feature weights do not.

    A linear model on the two-block synthetic task has sensitivities proportional to
    each column's second moment. With a constant Var(θ_k) a pair of domains differs in
    s_k exactly when it differs in Jacobian energy.
    """
    n = config.separation_samples
    invariant_dim = spurious_dim = 2
    spec = ModelSpec(layer_sizes=(invariant_dim + spurious_dim, 1), head="mse")
    invariant = np.arange(invariant_dim)
    spurious = np.arange(invariant_dim, invariant_dim + spurious_dim)
    medians_inv, medians_spur, mismatches, separated = [], [], 0, True
    for _ in range(config.separation_seeds):
        domains = generate(
            SyntheticSpec(
                samples_per_domain=n,
                invariant_dim=invariant_dim,
                spurious_dim=spurious_dim,
                task="regression",
                seed=int(rng.integers(2**31)),
            )
        )
        params = init_params(spec)
        params = params.with_variances(np.full(params.size, 0.25))
        report = domain_report(spec, params, domains)
        medians_inv.append(float(np.median(report.cv[invariant])))
        medians_spur.append(float(np.median(report.cv[spurious])))
        separated &= bool(np.max(report.cv[invariant]) < np.min(report.cv[spurious]))
        separated &= set(rank_by_dispersion(report)[:spurious_dim]) == set(spurious)

        energy = np.stack([jacobian_energy(spec, params, d) for d in domains], axis=1)
        noise = 4.0 * np.sqrt(2.0) * np.sqrt(2.0 / n)
        for a in range(len(domains)):
            for b in range(a + 1, len(domains)):
                e_a, e_b = energy[:, a], energy[:, b]
                s_a, s_b = report.per_domain[:, a], report.per_domain[:, b]
                energy_differs = np.abs(e_a - e_b) > noise * np.maximum(e_a, e_b)
                sensitivity_differs = np.abs(s_a - s_b) > noise * np.maximum(s_a, s_b)
                mismatches += int(np.sum(energy_differs != sensitivity_differs))
                mismatches += int(np.sum(energy_differs[invariant]))
                mismatches += int(np.sum(~energy_differs[spurious]))

    worst_invariant = max(medians_inv)
    passed = (
        worst_invariant < INVARIANT_CV_LIMIT
        and min(medians_spur) > SPURIOUS_CV_FLOOR
        and separated
        and mismatches == 0
    )
    return passed, worst_invariant, INVARIANT_CV_LIMIT, {
        "invariant_medians": medians_inv,
        "spurious_medians": medians_spur,
        "separated": separated,
        "energy_mismatches": mismatches,
    }


def check_contamination(config: ValidationConfig, rng: np.random.Generator) -> Outcome:
    """Off-diagonal contamination never exceeds its bound under random full Σ_θ."""
    spec = ModelSpec(layer_sizes=(3, 6, 2), activation="tanh", head="mse")
    params = init_params(spec)
    features = rng.standard_normal((32, 3))
    violations, worst_ratio = 0, 0.0
    for _ in range(config.contamination_trials):
        rank = int(rng.integers(1, params.size + 1))
        sigma = random_spd(rng, params.size, rank=rank)
        try:
            lhs, rhs = contamination_bound_check(spec, params, features, sigma)
        except ValidationFailure as exc:
            logger.warning("contamination: %s", exc)
            violations += 1
            continue
        violations += int(np.sum(lhs > rhs + 1e-12 * (1.0 + rhs)))
        live = rhs > 0
        if np.any(live):
            worst_ratio = max(worst_ratio, float(np.max(lhs[live] / rhs[live])))
    return violations == 0, float(violations), 0.0, {"max_lhs_over_rhs": worst_ratio}


CHECKS: Dict[str, Callable[[ValidationConfig, np.random.Generator], Outcome]] = {
    "gradients": check_gradients,
    "covariance": check_covariance,
    "decomposition": check_decomposition,
    "sensitivity_index": check_sensitivity_index,
    "fisher": check_fisher,
    "separation": check_separation,
    "contamination": check_contamination,
}


def run_validation(config: ValidationConfig) -> List[CheckResult]:
    """Run every enabled check in a fixed order.

    Each check draws from its own child of ``config.seed``, so disabling a check does
    not change the random models the others see.
    """
    streams = dict(zip(CHECK_NAMES, np.random.SeedSequence(config.seed).spawn(len(CHECK_NAMES))))
    results = []
    for name in CHECK_NAMES:
        if name not in config.checks:
            continue
        started = time.perf_counter()
        passed, measured, tolerance, details = CHECKS[name](
            config, np.random.default_rng(streams[name])
        )
        seconds = time.perf_counter() - started
        result = CheckResult(
            name=name,
            passed=bool(passed),
            measured=float(measured),
            tolerance=float(tolerance),
            seconds=seconds,
            details=details,
        )
        logger.info(
            "%-17s %s measured=%.3g tolerance=%.3g (%.2fs)",
            name,
            "PASS" if result.passed else "FAIL",
            result.measured,
            result.tolerance,
            seconds,
        )
        if seconds > CHECK_TIME_LIMIT:
            logger.warning("%s took %.1fs (limit %.0fs)", name, seconds, CHECK_TIME_LIMIT)
        results.append(result)
    return results


def validation_payload(results: Sequence[CheckResult]) -> Dict[str, Any]:
    return {
        "passed": all(r.passed for r in results),
        "checks": [
            {
                "name": r.name,
                "passed": r.passed,
                "measured": r.measured,
                "tolerance": r.tolerance,
                "seconds": r.seconds,
                "within_time_limit": r.seconds <= CHECK_TIME_LIMIT,
                "details": r.details,
            }
            for r in results
        ],
    }


def write_validation_report(results: Sequence[CheckResult], output_path: str) -> None:
    write_json(output_path, validation_payload(results))
