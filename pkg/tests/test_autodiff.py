from __future__ import annotations

import numpy as np
import pytest

from conftest import make_params, quadratic_problem, scalar_linear
from dsp_sensitivity_analysis._errors import CapabilityError, ContractError, DimensionError
from dsp_sensitivity_analysis._models import ModelSpec
from dsp_sensitivity_analysis._oracles import (
    fd_gradient,
    fd_jacobian,
    max_relative_error,
    reference_forward,
)
from dsp_sensitivity_analysis.autodiff import (
    forward,
    grad_params,
    hvp,
    jacobian_input,
    jacobian_params,
)
from dsp_sensitivity_analysis.models import init_params, supervised_loss


def relu_dead_unit():
    """[1→2→1] ReLU net whose second hidden unit is switched off."""
    spec = ModelSpec(layer_sizes=(1, 2, 1), activation="relu", head="mse")
    # layer1.weight, layer1.bias, layer2.weight, layer2.bias
    return spec, make_params(spec, [1.0, 0.0, 0.0, -1.0, 1.0, 1.0, 0.0])


class TestForward:
    """Forward evaluation of fully connected models."""

    def test_scalar_linear_map(self):
        spec, params = scalar_linear(2.0)
        y, _ = forward(spec, params, np.array([3.0]))
        np.testing.assert_array_equal(y, [6.0])

    def test_identity_model_returns_input(self):
        spec = ModelSpec(layer_sizes=(3,), head="mse")
        params = init_params(spec)
        assert params.size == 0
        x = np.array([0.5, -1.0, 2.0])
        y, _ = forward(spec, params, x)
        np.testing.assert_array_equal(y, x)

    def test_matches_plain_loop_reference(self, tanh_mlp, rng):
        spec, params = tanh_mlp
        for _ in range(5):
            x = rng.standard_normal(spec.input_dim)
            y, _ = forward(spec, params, x)
            np.testing.assert_allclose(y, reference_forward(spec, params, x), rtol=0, atol=1e-12)

    def test_batch_rows_match_single_samples(self, tanh_mlp, rng):
        spec, params = tanh_mlp
        batch = rng.standard_normal((4, spec.input_dim))
        y, _ = forward(spec, params, batch)
        assert y.shape == (4, spec.output_dim)
        for row, x in zip(y, batch):
            np.testing.assert_allclose(row, forward(spec, params, x)[0], rtol=0, atol=1e-14)

    def test_wrong_input_width_names_layer(self, tanh_mlp):
        spec, params = tanh_mlp
        with pytest.raises(DimensionError, match="layer1"):
            forward(spec, params, np.zeros(spec.input_dim + 1))

    def test_parameters_of_other_architecture_rejected(self, tanh_mlp):
        spec, _ = tanh_mlp
        other = init_params(ModelSpec(layer_sizes=(3, 4, 2)))
        with pytest.raises(DimensionError):
            forward(spec, other, np.zeros(3))

    def test_repeated_evaluation_is_bit_identical(self, tanh_mlp, rng):
        spec, params = tanh_mlp
        x = rng.standard_normal((3, spec.input_dim))
        labels = np.array([0, 1, 1])
        first = grad_params(*supervised_loss(spec, params, (x, labels)))
        second = grad_params(*supervised_loss(spec, params, (x, labels)))
        assert first.tobytes() == second.tobytes()


class TestGradParams:
    """Loss gradients read off the tape."""

    def test_hand_differentiable_mse(self):
        spec, params = scalar_linear(2.0)
        tape, loss = supervised_loss(spec, params, (np.array([[3.0]]), np.array([0.0])))
        assert float(tape.value(loss)) == pytest.approx(36.0)
        np.testing.assert_allclose(grad_params(tape, loss), [36.0, 12.0])

    def test_identity_model_has_empty_gradient(self):
        spec = ModelSpec(layer_sizes=(2,), head="mse")
        params = init_params(spec)
        tape, loss = supervised_loss(spec, params, (np.ones((2, 2)), np.zeros((2, 2))))
        assert grad_params(tape, loss).shape == (0,)

    def test_non_scalar_loss_is_contract_error(self, tanh_mlp, rng):
        spec, params = tanh_mlp
        x = rng.standard_normal((3, spec.input_dim))
        tape, losses = supervised_loss(spec, params, (x, np.array([0, 1, 0])), reduction="none")
        with pytest.raises(ContractError):
            grad_params(tape, losses)

    def test_matches_finite_differences(self, tanh_mlp, rng):
        spec, params = tanh_mlp
        x = rng.standard_normal((4, spec.input_dim))
        labels = np.array([0, 1, 1, 0])
        grad = grad_params(*supervised_loss(spec, params, (x, labels)))

        def loss_at(theta):
            tape, node = supervised_loss(spec, params.with_values(theta), (x, labels))
            return float(tape.value(node))

        expected = fd_gradient(loss_at, params.values)
        assert max_relative_error(grad, expected, floor=1e-3 * np.max(np.abs(expected))) < 1e-5

    def test_gradient_is_jacobian_transpose_times_loss_gradient(self, rng):
        spec = ModelSpec(layer_sizes=(3, 4, 2), activation="tanh", head="mse", init_seed=2)
        params = init_params(spec)
        x = rng.standard_normal(3)
        target = rng.standard_normal(2)
        tape, loss = supervised_loss(spec, params, (x[None, :], target[None, :]))
        y, _ = forward(spec, params, x)
        dl_dy = 2.0 * (y - target) / spec.output_dim
        expected = jacobian_params(spec, params, x).T @ dl_dy
        np.testing.assert_allclose(grad_params(tape, loss), expected, rtol=0, atol=1e-10)


class TestJacobians:
    """Parameter and input Jacobians."""

    def test_scalar_affine_parameter_jacobian(self):
        spec, params = scalar_linear(0.7, -0.2)
        np.testing.assert_allclose(jacobian_params(spec, params, np.array([3.0])), [[3.0, 1.0]])

    def test_dead_unit_has_zero_columns(self):
        spec, params = relu_dead_unit()
        jac = jacobian_params(spec, params, np.array([2.0]))
        np.testing.assert_allclose(jac, [[2.0, 0.0, 1.0, 0.0, 2.0, 0.0, 1.0]])

    def test_linear_map_input_jacobian_is_weight(self):
        spec = ModelSpec(layer_sizes=(2, 2), head="mse")
        params = make_params(spec, [1.0, 2.0, 3.0, 4.0, 0.0, 0.0])
        np.testing.assert_allclose(
            jacobian_input(spec, params, np.array([0.3, -0.1])), [[1.0, 2.0], [3.0, 4.0]]
        )

    def test_relu_in_positive_region_is_locally_linear(self):
        spec = ModelSpec(layer_sizes=(2, 2, 2), activation="relu", head="mse")
        outer = [0.5, -1.0, 2.0, 0.25]
        params = make_params(spec, [1.0, 0.0, 0.0, 1.0, 5.0, 5.0, *outer, 0.0, 0.0])
        np.testing.assert_allclose(
            jacobian_input(spec, params, np.array([0.1, 0.2])),
            np.reshape(outer, (2, 2)),
        )

    def test_batch_shapes(self, tanh_mlp, rng):
        spec, params = tanh_mlp
        batch = rng.standard_normal((5, spec.input_dim))
        assert jacobian_params(spec, params, batch).shape == (5, spec.output_dim, params.size)
        assert jacobian_input(spec, params, batch).shape == (5, spec.output_dim, spec.input_dim)

    def test_match_finite_differences(self, tanh_mlp, rng):
        spec, params = tanh_mlp
        x = rng.standard_normal(spec.input_dim)
        fd_theta = fd_jacobian(lambda t: forward(spec, params.with_values(t), x)[0], params.values)
        fd_x = fd_jacobian(lambda z: forward(spec, params, z)[0], x)
        assert max_relative_error(
            jacobian_params(spec, params, x), fd_theta, floor=1e-3 * np.max(np.abs(fd_theta))
        ) < 1e-5
        assert max_relative_error(
            jacobian_input(spec, params, x), fd_x, floor=1e-3 * np.max(np.abs(fd_x))
        ) < 1e-5


class TestHvp:
    """Hessian-vector products."""

    def test_quadratic_is_exact(self, rng):
        a = rng.standard_normal((4, 4))
        a = a + a.T
        params, builder = quadratic_problem(a, rng.standard_normal(4))
        v = rng.standard_normal(4)
        np.testing.assert_allclose(hvp(builder, params, v, method="exact"), a @ v, atol=1e-12)

    def test_zero_direction_gives_zero(self, tanh_mlp, rng):
        spec, params = tanh_mlp
        batch = (rng.standard_normal((3, 3)), np.array([0, 1, 0]))
        builder = lambda p: supervised_loss(spec, p, batch)  # noqa: E731
        for method in ("exact", "fd", "auto"):
            np.testing.assert_array_equal(hvp(builder, params, np.zeros(params.size), method=method), 0.0)

    def test_exact_matches_finite_differences(self, tanh_mlp, rng):
        spec, params = tanh_mlp
        batch = (rng.standard_normal((6, 3)), rng.integers(0, 2, size=6))
        builder = lambda p: supervised_loss(spec, p, batch)  # noqa: E731
        v = rng.standard_normal(params.size)
        exact = hvp(builder, params, v, method="exact")
        approx = hvp(builder, params, v, method="fd")
        assert max_relative_error(exact, approx, floor=1e-2 * np.max(np.abs(exact))) < 1e-3

    def test_relu_exact_is_capability_error(self, relu_mlp, rng):
        spec, params = relu_mlp
        batch = (rng.standard_normal((3, 3)), rng.standard_normal((3, 2)))
        builder = lambda p: supervised_loss(spec, p, batch)  # noqa: E731
        with pytest.raises(CapabilityError, match="fd-hvp"):
            hvp(builder, params, np.ones(params.size), method="exact")

    def test_relu_exact_rejected_away_from_kinks(self):
        spec = ModelSpec(layer_sizes=(1, 2, 1), activation="relu", head="mse")
        params = make_params(spec, [1.0, 2.0, 0.5, 0.5, 1.0, 1.0, 0.0])
        # pre-activations 1.5 and 2.5
        batch = (np.array([[1.0]]), np.array([[0.0]]))
        builder = lambda p: supervised_loss(spec, p, batch)  # noqa: E731
        with pytest.raises(CapabilityError):
            hvp(builder, params, np.ones(params.size), method="exact")

    def test_relu_auto_falls_back_to_finite_differences(self, relu_mlp, rng):
        spec, params = relu_mlp
        batch = (rng.standard_normal((3, 3)), rng.standard_normal((3, 2)))
        builder = lambda p: supervised_loss(spec, p, batch)  # noqa: E731
        v = rng.standard_normal(params.size)
        np.testing.assert_array_equal(
            hvp(builder, params, v, method="auto"), hvp(builder, params, v, method="fd")
        )

    def test_direction_length_checked(self, tanh_mlp):
        spec, params = tanh_mlp
        builder = lambda p: supervised_loss(spec, p, (np.zeros((1, 3)), np.array([0])))  # noqa: E731
        with pytest.raises(DimensionError):
            hvp(builder, params, np.ones(params.size + 1))
