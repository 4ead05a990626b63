from __future__ import annotations

import sys
from pathlib import Path

import numpy as np
import pytest


PROJECT_ROOT = Path(__file__).resolve().parents[1]
SRC_PATH = PROJECT_ROOT / "src"

if str(SRC_PATH) not in sys.path:
    sys.path.insert(0, str(SRC_PATH))

from dsp_sensitivity_analysis._models import (  # noqa: E402
    DomainDataset,
    ModelSpec,
    ParameterVector,
    Segment,
    SyntheticSpec,
)
from dsp_sensitivity_analysis._tape import Tape  # noqa: E402
from dsp_sensitivity_analysis.domain_data import generate  # noqa: E402
from dsp_sensitivity_analysis.models import init_params  # noqa: E402
from dsp_sensitivity_analysis.sensitivity import cross_domain_stats  # noqa: E402


def make_params(spec: ModelSpec, values, variances=None) -> ParameterVector:
    """Parameters for ``spec`` with explicit flat values."""
    values = np.asarray(values, dtype=np.float64)
    base = init_params(spec)
    assert values.size == base.size
    return ParameterVector(
        values=values,
        variances=base.variances if variances is None else variances,
        segments=base.segments,
    )


def scalar_linear(weight: float, bias: float = 0.0, *, head: str = "mse"):
    """``f(x) = w·x + b`` with one input and one output."""
    spec = ModelSpec(layer_sizes=(1, 1), head=head)
    return spec, make_params(spec, [weight, bias])


def quadratic_problem(a: np.ndarray, theta: np.ndarray):
    """``L = ½θᵀAθ`` recorded on a tape with θ as a single ``1 × d`` segment."""
    size = theta.size
    params = ParameterVector(
        values=theta,
        variances=np.ones(size),
        segments=(Segment(name="theta", offset=0, length=size, shape=(1, size)),),
    )

    def builder(p: ParameterVector):
        tape = Tape()
        node = tape.bind(p)["theta"]
        a_theta = tape.matmul(node, tape.constant(a))
        loss = tape.scale(tape.sum(tape.mul(a_theta, node)), 0.5)
        return tape, loss

    return params, builder


@pytest.fixture()
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


@pytest.fixture()
def tanh_mlp():
    spec = ModelSpec(layer_sizes=(3, 5, 2), activation="tanh", head="softmax-ce", init_seed=7)
    params = init_params(spec)
    noise = np.random.default_rng(7).standard_normal(params.size)
    return spec, params.with_values(params.values + 0.1 * noise)


@pytest.fixture()
def relu_mlp():
    spec = ModelSpec(layer_sizes=(3, 4, 2), activation="relu", head="mse", init_seed=3)
    return spec, init_params(spec)


@pytest.fixture()
def small_domains():
    """Three small classification domains with a spurious shortcut in two of them."""
    return generate(
        SyntheticSpec(
            samples_per_domain=60,
            leak_strengths=(2.0, 1.0, 0.0),
            label_noise=0.1,
            seed=11,
        )
    )


@pytest.fixture()
def regression_domains():
    return generate(
        SyntheticSpec(samples_per_domain=40, task="regression", label_noise=0.1, seed=5)
    )


@pytest.fixture()
def segment_registry():
    return (
        Segment(name="layer1.weight", offset=0, length=4, shape=(2, 2)),
        Segment(name="layer1.bias", offset=4, length=2, shape=(2,)),
        Segment(name="layer2.weight", offset=6, length=2, shape=(1, 2)),
        Segment(name="layer2.bias", offset=8, length=1, shape=(1,)),
    )


@pytest.fixture()
def two_domains():
    features = np.array([[1.0], [2.0], [3.0]])
    return [
        DomainDataset("a", features, np.array([0.0, 1.0, 2.0])),
        DomainDataset("b", 2.0 * features, np.array([0.0, 1.0, 2.0])),
    ]


@pytest.fixture()
def hand_report(segment_registry):
    """Two-domain report over ``segment_registry`` with known c_k.

    c = [0, 0, 0, 0, 0.5, 0.5, 0, 1, 0]; the last parameter is dead.
    """
    per_domain = [
        [1.0, 1.0],
        [1.0, 1.0],
        [1.0, 1.0],
        [1.0, 1.0],
        [1.0, 3.0],
        [1.0, 3.0],
        [2.0, 2.0],
        [0.0, 4.0],
        [0.0, 0.0],
    ]
    return cross_domain_stats(
        per_domain, 0.0, segments=segment_registry, domain_ids=("alpha", "beta")
    )
