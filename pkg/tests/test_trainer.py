from __future__ import annotations

from dataclasses import replace

import numpy as np
import pytest

from conftest import quadratic_problem
from dsp_sensitivity_analysis._errors import (
    CapabilityError,
    ContractError,
    DimensionError,
    DivergenceError,
    ProtocolError,
)
from dsp_sensitivity_analysis._models import (
    CoefficientSnapshot,
    ModelSpec,
    RunMetrics,
    TrainConfig,
)
from dsp_sensitivity_analysis._config import default_config
from dsp_sensitivity_analysis._oracles import fd_gradient, max_relative_error
from dsp_sensitivity_analysis.autodiff import grad_params
from dsp_sensitivity_analysis.domain_data import generate, lodo_splits, split_validation
from dsp_sensitivity_analysis.models import evaluate, init_params, supervised_loss
from dsp_sensitivity_analysis.trainer import (
    Adam,
    GradientDescent,
    ParameterVarianceTracker,
    RegularizerContext,
    ablation_configs,
    ablation_suite,
    coefficient_drift,
    ds_regularizer,
    heldout_ordering,
    regularizer_gradient,
    select_lambda,
    summary_rows,
    total_loss,
    train,
)


def classifier_config(**overrides) -> TrainConfig:
    spec = ModelSpec(layer_sizes=(4, 6, 2), activation="tanh", init_seed=3)
    defaults = dict(model=spec, epochs=3, batch_size=16, learning_rate=0.1, seed=2)
    defaults.update(overrides)
    return TrainConfig(**defaults)


class TestRegularizer:
    """The sensitivity-weighted squared-gradient penalty."""

    def test_three_term_sum(self):
        assert ds_regularizer([2.0, 0.0, 1.0], [1.0, 5.0, 3.0]) == pytest.approx(11.0)

    def test_uniform_coefficients_give_squared_norm(self, rng):
        g = rng.standard_normal(7)
        assert ds_regularizer(np.ones(7), g) == pytest.approx(float(g @ g))

    def test_zero_gradient(self):
        assert ds_regularizer([1.0, 2.0], [0.0, 0.0]) == 0.0

    def test_length_mismatch(self):
        with pytest.raises(DimensionError):
            ds_regularizer([1.0], [1.0, 2.0])

    def test_negative_coefficient(self):
        with pytest.raises(ContractError):
            ds_regularizer([-1.0], [1.0])

    def test_total_loss(self):
        assert total_loss(1.0, 11.0, 0.001) == pytest.approx(1.011)
        assert total_loss(0.7, 5.0, 0.0) == 0.7
        with pytest.raises(ContractError):
            total_loss(1.0, 1.0, -0.1)


class TestRegularizerGradient:
    """Gradient of the penalty with coefficients held constant."""

    def test_quadratic_exact(self, rng):
        a = rng.standard_normal((3, 3))
        a = a @ a.T
        params, builder = quadratic_problem(a, rng.standard_normal(3))
        g = a @ params.values
        context = RegularizerContext(tape_builder=builder, params=params)
        np.testing.assert_allclose(
            regularizer_gradient(np.ones(3), context, g, "exact-hvp"),
            2.0 * a @ (a @ params.values),
            atol=1e-12,
        )

    @pytest.mark.parametrize("mode", ["exact-hvp", "fd-hvp", "stop-grad-weighted"])
    def test_zero_coefficients(self, tanh_mlp, rng, mode):
        spec, params = tanh_mlp
        batch = (rng.standard_normal((4, 3)), np.array([0, 1, 1, 0]))
        context = RegularizerContext(lambda p: supervised_loss(spec, p, batch), params)
        g = grad_params(*supervised_loss(spec, params, batch))
        np.testing.assert_array_equal(
            regularizer_gradient(np.zeros(params.size), context, g, mode), 0.0
        )

    def test_stop_grad_is_weighted_gradient(self):
        out = regularizer_gradient([2.0, 0.5], None, [1.0, -4.0], "stop-grad-weighted")
        np.testing.assert_allclose(out, [4.0, -4.0])

    def test_exact_matches_finite_difference_of_penalty(self, tanh_mlp, rng):
        spec, params = tanh_mlp
        batch = (rng.standard_normal((5, 3)), rng.integers(0, 2, size=5))
        c = rng.random(params.size)

        def penalty(theta):
            return ds_regularizer(c, grad_params(*supervised_loss(spec, params.with_values(theta), batch)))

        context = RegularizerContext(lambda p: supervised_loss(spec, p, batch), params)
        g = grad_params(*supervised_loss(spec, params, batch))
        exact = regularizer_gradient(c, context, g, "exact-hvp")
        expected = fd_gradient(penalty, params.values, h=1e-5)
        assert max_relative_error(exact, expected, floor=1e-2 * np.max(np.abs(expected))) < 1e-3

    def test_exact_on_relu_suggests_fd(self, relu_mlp, rng):
        spec, params = relu_mlp
        batch = (rng.standard_normal((3, 3)), rng.standard_normal((3, 2)))
        context = RegularizerContext(lambda p: supervised_loss(spec, p, batch), params)
        with pytest.raises(CapabilityError, match="fd-hvp"):
            regularizer_gradient(np.ones(params.size), context, np.ones(params.size), "exact-hvp")


class TestOptimizers:
    """Plain gradient descent and Adam."""

    def test_gradient_descent_step(self):
        np.testing.assert_allclose(
            GradientDescent(0.5).step(np.array([1.0, 2.0]), np.array([2.0, -2.0])), [0.0, 3.0]
        )

    def test_adam_first_step_moves_by_learning_rate(self):
        out = Adam(0.1).step(np.array([1.0, 1.0]), np.array([3.0, -0.5]))
        np.testing.assert_allclose(out, [0.9, 1.1], rtol=1e-6)

    def test_variance_tracker_window(self):
        tracker = ParameterVarianceTracker(window=3)
        tracker.push(np.array([0.0, 1.0]))
        assert tracker.variances() is None
        for values in ([1.0, 1.0], [2.0, 1.0], [3.0, 1.0]):
            tracker.push(np.array(values))
        assert len(tracker) == 3
        np.testing.assert_allclose(tracker.variances(), [2.0 / 3.0, 0.0])

    def test_variance_tracker_needs_two_entries(self):
        with pytest.raises(ContractError):
            ParameterVarianceTracker(window=1)


class TestTrain:
    """The regularized training loop."""

    def test_lambda_zero_is_bit_identical_to_erm(self, small_domains):
        zero, _ = train(classifier_config(lam=0.0), small_domains[:2])
        erm, _ = train(classifier_config(coefficient_mode="off"), small_domains[:2])
        assert zero.values.tobytes() == erm.values.tobytes()

    def test_refresh_at_zero_then_every_t_update(self, small_domains):
        _, metrics = train(classifier_config(epochs=5, t_update=2), small_domains[:2])
        assert metrics.refresh_epochs == [0, 2, 4]
        assert metrics.mode == "dynamic"

    def test_static_refreshes_once(self, small_domains):
        _, metrics = train(classifier_config(epochs=4, coefficient_mode="static"), small_domains[:2])
        assert metrics.refresh_epochs == [0]

    def test_uniform_never_refreshes_and_penalizes_gradient_norm(self, small_domains):
        _, metrics = train(
            classifier_config(epochs=2, coefficient_mode="uniform", log_steps=True), small_domains[:2]
        )
        assert metrics.snapshots == []
        assert metrics.steps
        for step in metrics.steps:
            assert step.reg_value == pytest.approx(step.grad_norm_sq, rel=1e-12)

    def test_iteration_unit_refreshes_by_step(self, small_domains):
        # 120 source rows in batches of 32 take 4 steps per epoch
        _, metrics = train(
            classifier_config(epochs=2, batch_size=32, update_unit="iteration", t_update=3),
            small_domains[:2],
        )
        assert [snap.step for snap in metrics.snapshots] == [0, 3, 6]

    def test_one_record_per_epoch_with_heldout_metrics(self, small_domains):
        _, metrics = train(classifier_config(epochs=3), small_domains[:2], small_domains[2])
        assert [r.epoch for r in metrics.records] == [0, 1, 2]
        assert all(set(r.heldout_metrics) == {"loss", "accuracy"} for r in metrics.records)
        assert set(metrics.records[0].domain_metrics) == {"0", "1"}
        assert metrics.final_heldout == metrics.records[-1].heldout_metrics
        assert metrics.total_steps == 3 * 8

    def test_snapshot_coefficients_are_report_cv(self, small_domains):
        _, metrics = train(classifier_config(epochs=1), small_domains[:2])
        (snapshot,) = metrics.snapshots
        np.testing.assert_array_equal(snapshot.coefficients, snapshot.report.cv)
        assert snapshot.report.domain_ids == ("0", "1")

    def test_same_seed_is_deterministic(self, small_domains):
        first, _ = train(classifier_config(), small_domains[:2])
        second, _ = train(classifier_config(), small_domains[:2])
        assert first.values.tobytes() == second.values.tobytes()

    def test_regression_descends(self, regression_domains):
        spec = ModelSpec(layer_sizes=(4, 1), head="mse")
        config = TrainConfig(model=spec, epochs=10, batch_size=8, learning_rate=0.05, lam=0.01)
        before = evaluate(spec, init_params(spec), regression_domains[0])["loss"]
        params, metrics = train(config, regression_domains[:2])
        assert metrics.records[-1].source_loss < before
        assert evaluate(spec, params, regression_domains[0])["loss"] < before

    @pytest.mark.parametrize(
        "overrides",
        [
            {"optimizer": "adam", "learning_rate": 0.01},
            {"estimator_mode": "loss-grad"},
            {"estimator_mode": "loss-grad-batch"},
            {"regularizer_gradient_mode": "exact-hvp"},
            {"regularizer_gradient_mode": "fd-hvp"},
            {"variance_mode": "empirical", "variance_window": 5},
        ],
    )
    def test_variants_run(self, small_domains, overrides):
        params, metrics = train(classifier_config(epochs=2, **overrides), small_domains[:2])
        assert np.all(np.isfinite(params.values))
        assert len(metrics.records) == 2

    def test_single_domain_is_protocol_error(self, small_domains):
        with pytest.raises(ProtocolError):
            train(classifier_config(), small_domains[:1])

    def test_feature_mismatch_is_dimension_error(self, small_domains):
        config = classifier_config(model=ModelSpec(layer_sizes=(3, 2)))
        with pytest.raises(DimensionError, match="layer1"):
            train(config, small_domains[:2])

    def test_exact_hvp_on_relu_is_capability_error(self, small_domains):
        config = classifier_config(
            model=ModelSpec(layer_sizes=(4, 3, 2), activation="relu"),
            regularizer_gradient_mode="exact-hvp",
        )
        with pytest.raises(CapabilityError):
            train(config, small_domains[:2])

    def test_divergence_reports_hyperparameters(self, regression_domains):
        spec = ModelSpec(layer_sizes=(4, 8, 1), activation="identity", head="mse")
        config = TrainConfig(model=spec, epochs=50, batch_size=40, learning_rate=1e3, lam=0.0)
        with pytest.raises(DivergenceError) as excinfo:
            train(config, regression_domains[:2])
        assert excinfo.value.learning_rate == 1e3
        assert "lambda=0" in str(excinfo.value)

    @pytest.mark.parametrize(
        "overrides",
        [{"lam": -1.0}, {"t_update": 0}, {"learning_rate": 0.0}, {"optimizer": "sgd"}],
    )
    def test_invalid_configs(self, overrides):
        with pytest.raises(ContractError):
            classifier_config(**overrides)


class TestAblation:
    """Ablation configurations, runs and summaries."""

    def test_default_grid(self):
        configs = ablation_configs(classifier_config())
        keys = [(c.run_mode, c.lam, c.t_update) for c in configs]
        assert len(configs) == 10
        assert len(set(keys)) == 10
        assert keys[:4] == [
            ("dynamic", 0.001, 2),
            ("erm", 0.0, 2),
            ("uniform", 0.001, 2),
            ("static", 0.001, 2),
        ]

    def test_suite_trains_every_variant(self, small_domains):
        seen = []
        runs = ablation_suite(
            classifier_config(epochs=1),
            small_domains[:2],
            small_domains[2],
            lambdas=(0.001,),
            t_updates=(2,),
            on_run=seen.append,
        )
        assert [r.run_id for r in runs] == [
            "dynamic-lam0.001-t2",
            "erm-lam0-t2",
            "uniform-lam0.001-t2",
            "static-lam0.001-t2",
        ]
        assert seen == runs
        assert all(np.isfinite(r.heldout_metric) for r in runs)
        rows = summary_rows(runs, split=2)
        assert [row["split"] for row in rows] == [2, 2, 2, 2]
        assert rows[1]["mode"] == "erm"

    def test_select_lambda_picks_a_candidate(self, small_domains):
        best, scores = select_lambda(
            classifier_config(epochs=1), small_domains[:2], (0.0, 0.01), fraction=0.25, seed=1
        )
        assert set(scores) == {0.0, 0.01}
        assert best == min(scores, key=scores.get)

    def test_select_lambda_on_given_validation(self, small_domains):
        validation = [d.subset(np.arange(10)) for d in small_domains[:2]]
        best, scores = select_lambda(
            classifier_config(epochs=1), small_domains[:2], (0.01, 0.1), validation=validation
        )
        config = classifier_config(epochs=1, lam=best)
        params, _ = train(config, small_domains[:2])
        expected = np.mean([evaluate(config.model, params, d)["loss"] for d in validation])
        assert scores[best] == pytest.approx(expected)

    def test_suite_tunes_lambda_for_full_method(self, small_domains):
        base = classifier_config(epochs=1, lam=0.5)
        best, _ = select_lambda(base, small_domains[:2], (0.001, 0.01), seed=base.seed)
        runs = ablation_suite(
            base,
            small_domains[:2],
            small_domains[2],
            lambdas=(0.001, 0.01),
            t_updates=(2,),
            tune_lambda=True,
        )
        assert runs[0].run_id == f"dynamic-lam{best:g}-t2"
        assert runs[2].config.lam == best
        assert {run.selected_lambda for run in runs} == {best}
        rows = summary_rows(runs)
        assert all(row["selected_lambda"] == best for row in rows)
        ordering = heldout_ordering(rows, base.lam, 2)
        assert ordering["full"] == pytest.approx(runs[0].heldout_metric)
        assert ordering["selected_lambdas"] == [best]

    def test_heldout_ordering(self):
        rows = [
            {"mode": "dynamic", "lambda": 0.001, "t_update": 2, "heldout_metric": 0.2},
            {"mode": "dynamic", "lambda": 0.0001, "t_update": 2, "heldout_metric": 0.4},
            {"mode": "dynamic", "lambda": 0.1, "t_update": 2, "heldout_metric": 0.5},
            {"mode": "dynamic", "lambda": 0.001, "t_update": 4, "heldout_metric": 0.9},
            {"mode": "uniform", "lambda": 0.001, "t_update": 2, "heldout_metric": 0.3},
            {"mode": "static", "lambda": 0.001, "t_update": 2, "heldout_metric": 0.35},
            {"mode": "erm", "lambda": 0.0, "t_update": 2, "heldout_metric": 0.6},
        ]
        ordering = heldout_ordering(rows, 0.001, 2)
        assert ordering["full"] == pytest.approx(0.2)
        assert ordering["full_le_uniform_le_erm"] is True
        assert ordering["full_lt_erm"] is True
        assert ordering["best_lambda"] == 0.001
        assert ordering["interior_peak"] is True
        assert set(ordering["lambda_sweep"]) == {"0.0001", "0.001", "0.1"}

    def test_heldout_ordering_follows_selected_lambda(self):
        rows = [
            {"mode": "dynamic", "lambda": 0.1, "t_update": 2, "heldout_metric": 0.2, "selected_lambda": 0.1},
            {"mode": "dynamic", "lambda": 0.001, "t_update": 2, "heldout_metric": 0.5, "selected_lambda": 0.1},
            {"mode": "dynamic", "lambda": 0.001, "t_update": 2, "heldout_metric": 0.4, "selected_lambda": 0.001},
            {"mode": "erm", "lambda": 0.0, "t_update": 2, "heldout_metric": 0.6, "selected_lambda": 0.1},
        ]
        ordering = heldout_ordering(rows, 0.001, 2)
        assert ordering["full"] == pytest.approx(0.3)
        assert ordering["selected_lambdas"] == [0.001, 0.1]

    @pytest.mark.slow
    def test_full_method_beats_erm_on_synthetic_lodo(self):
        config = default_config()
        domains = generate(config.dataset.synthetic)
        rows = []
        for split in lodo_splits(domains):
            for seed in (0, 1, 2):
                base = replace(
                    config.train, seed=seed, model=replace(config.model, init_seed=seed)
                )
                fit, validation = split_validation(
                    split.train, config.dataset.validation_fraction, seed
                )
                runs = ablation_suite(
                    base,
                    fit,
                    split.held_out,
                    t_updates=(base.t_update,),
                    validation=validation,
                    tune_lambda=True,
                )
                rows.extend(summary_rows(runs, split=split.index))
        ordering = heldout_ordering(rows, config.train.lam, config.train.t_update)
        assert ordering["full_lt_erm"], ordering
        assert ordering["full_le_uniform_le_erm"], ordering

    def test_coefficient_drift(self):
        metrics = RunMetrics(mode="dynamic")
        metrics.add_snapshot(CoefficientSnapshot(0, 0, np.array([1.0, 2.0])))
        metrics.add_snapshot(CoefficientSnapshot(2, 8, np.array([0.5, 3.0])))
        drift = coefficient_drift(metrics)
        assert drift["snapshots"] == 2.0
        assert drift["first_mean"] == pytest.approx(1.5)
        assert drift["last_mean"] == pytest.approx(1.75)
        assert drift["fraction_decreased"] == pytest.approx(0.5)
        assert coefficient_drift(RunMetrics()) == {}

    def test_replace_keeps_validation(self):
        with pytest.raises(ContractError):
            replace(classifier_config(), coefficient_mode="adaptive")
