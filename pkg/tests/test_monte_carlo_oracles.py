from __future__ import annotations

import numpy as np
import pytest

from dsp_sensitivity_analysis._models import ModelSpec, PerturbationSpec, SyntheticSpec
from dsp_sensitivity_analysis._oracles import (
    mc_coordinate_sensitivity,
    mc_output_covariance,
    mc_parameter_variance,
    random_spd,
)
from dsp_sensitivity_analysis.autodiff import jacobian_input, jacobian_params
from dsp_sensitivity_analysis.domain_data import generate
from dsp_sensitivity_analysis.models import init_params
from dsp_sensitivity_analysis.sensitivity import (
    domain_report,
    propagate_covariance,
    sensitivity_index,
    total_output_variance,
)

pytestmark = pytest.mark.slow


def smooth_regressor(seed: int = 0):
    spec = ModelSpec(layer_sizes=(3, 6, 2), activation="tanh", head="mse", init_seed=seed)
    return spec, init_params(spec)


class TestCovarianceAgainstSampling:
    """Propagated covariance against Monte-Carlo perturbation."""

    def test_diagonal_perturbations(self, rng):
        spec, params = smooth_regressor(1)
        x0 = rng.standard_normal(3)
        perturbation = PerturbationSpec(
            rng.random(3), rng.random(params.size), samples=50_000, scale=1e-3
        )
        predicted = propagate_covariance(
            jacobian_input(spec, params, x0),
            jacobian_params(spec, params, x0),
            *perturbation.covariances(),
        )
        sampled, _ = mc_output_covariance(spec, params, x0, perturbation, seed=3)
        assert abs(np.trace(sampled) - np.trace(predicted)) / np.trace(predicted) < 0.02

    def test_joint_perturbation_with_cross_block(self, rng):
        spec, params = smooth_regressor(2)
        x0 = rng.standard_normal(3)
        joint = random_spd(rng, 3 + params.size)
        perturbation = PerturbationSpec(
            joint[:3, :3], joint[3:, 3:], joint[:3, 3:], samples=50_000, scale=1e-3
        )
        predicted = propagate_covariance(
            jacobian_input(spec, params, x0),
            jacobian_params(spec, params, x0),
            *perturbation.covariances(),
        )
        sampled, _ = mc_output_covariance(spec, params, x0, perturbation, seed=4)
        assert abs(np.trace(sampled) - np.trace(predicted)) / np.trace(predicted) < 0.02

    def test_parameter_variance_matches_trace(self, rng):
        spec, params = smooth_regressor(3)
        x0 = rng.standard_normal(3)
        variances = 1e-6 * rng.random(params.size)
        predicted = total_output_variance(spec, params, x0, variances)
        sampled = mc_parameter_variance(spec, params, x0, variances, samples=50_000, seed=5)
        assert abs(sampled - predicted) / predicted < 0.02


class TestSensitivityAgainstSampling:
    """Per-coordinate perturbation estimates of s_k."""

    def test_top_coordinates(self, rng):
        spec, params = smooth_regressor(4)
        features = rng.standard_normal((40, 3))
        s = sensitivity_index(spec, params, features)
        top = np.argsort(-s)[:5]
        sampled = mc_coordinate_sensitivity(
            spec, params, features, top, sigma=1e-3, draws_per_point=200, seed=6
        )
        np.testing.assert_allclose(sampled, s[top], rtol=0.1)


class TestSyntheticSeparation:
    """A linear model separates invariant from spurious coordinates."""

    def test_invariant_weights_have_small_dispersion(self):
        spec = ModelSpec(layer_sizes=(4, 1), head="mse")
        params = init_params(spec).with_variances(np.full(5, 0.25))
        domains = generate(
            SyntheticSpec(samples_per_domain=10_000, task="regression", spurious_scales=(1.0, 2.0, 4.0), seed=0)
        )
        report = domain_report(spec, params, domains, epsilon=0.0)
        weight_cv = report.cv[:4]
        assert np.all(weight_cv[:2] < 0.05)
        assert np.all(weight_cv[2:] > 0.5)
        # bias sensitivity is exactly Var(b) in every domain
        assert report.cv[4] == 0.0
