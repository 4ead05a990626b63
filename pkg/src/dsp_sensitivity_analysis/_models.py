from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np
from numpy.typing import NDArray

from ._errors import AnalysisIssue, ContractError, DataError, DimensionError

Tensor = NDArray[np.float64]

ACTIVATIONS = ("relu", "tanh", "identity")
HEADS = ("softmax-ce", "mse")
TASKS = ("classification", "regression")


def _frozen_array(values, dtype=np.float64) -> np.ndarray:
    array = np.array(values, dtype=dtype, copy=True, order="C")
    array.setflags(write=False)
    return array


@dataclass(frozen=True)
class Segment:
    """A named, contiguous slice of the flat parameter vector.

    Attributes:
        name: Segment name such as ``layer1.weight``.
        offset: Flat index of the first element.
        length: Number of elements (product of ``shape``).
        shape: Shape of the segment when viewed as an array.
    """

    name: str
    offset: int
    length: int
    shape: Tuple[int, ...]

    @property
    def stop(self) -> int:
        return self.offset + self.length


@dataclass(frozen=True)
class ParameterVector:
    """Flat parameter vector θ with per-coordinate variances and a segment registry.

    Values and variances are stored as read-only float64 arrays so that a vector can
    be shared between concurrent evaluations without copying.

    Attributes:
        values: Flat parameter values, length d_θ.
        variances: Flat Var(θ_k), length d_θ, all non-negative.
        segments: Ordered registry covering ``[0, d_θ)`` without gaps or overlap.
    """

    values: Tensor
    variances: Tensor
    segments: Tuple[Segment, ...]

    def __post_init__(self) -> None:
        values = _frozen_array(self.values).reshape(-1)
        values.setflags(write=False)
        variances = _frozen_array(self.variances).reshape(-1)
        variances.setflags(write=False)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "variances", variances)
        object.__setattr__(self, "segments", tuple(self.segments))

        if variances.shape != values.shape:
            raise DataError(
                f"variances length {variances.size} does not match values length {values.size}"
            )
        if np.any(variances < 0):
            raise DataError("parameter variances must be non-negative")
        offset = 0
        for seg in self.segments:
            if seg.offset != offset:
                raise DataError(
                    f"segment '{seg.name}' starts at {seg.offset}, expected {offset}"
                )
            if int(np.prod(seg.shape, dtype=np.int64)) != seg.length:
                raise DataError(f"segment '{seg.name}' shape does not match its length")
            offset = seg.stop
        if offset != values.size:
            raise DataError(
                f"segments cover {offset} entries but the vector has {values.size}"
            )

    @property
    def size(self) -> int:
        return int(self.values.size)

    @property
    def names(self) -> List[str]:
        return [seg.name for seg in self.segments]

    def segment(self, name: str) -> Segment:
        for seg in self.segments:
            if seg.name == name:
                return seg
        raise KeyError(name)

    def view(self, name: str) -> Tensor:
        """Return the read-only values of one segment in its natural shape."""
        seg = self.segment(name)
        return self.values[seg.offset : seg.stop].reshape(seg.shape)

    def locate(self, index: int) -> Tuple[str, int]:
        """Map a flat index k to ``(segment name, local index)``."""
        if not 0 <= index < self.size:
            raise IndexError(index)
        for seg in self.segments:
            if seg.offset <= index < seg.stop:
                return seg.name, index - seg.offset
        raise IndexError(index)  # pragma: no cover - segments cover the vector

    def with_values(self, values) -> "ParameterVector":
        return ParameterVector(values=values, variances=self.variances, segments=self.segments)

    def with_variances(self, variances) -> "ParameterVector":
        return ParameterVector(values=self.values, variances=variances, segments=self.segments)


@dataclass(frozen=True)
class ModelSpec:
    """Architecture of a fully connected model.

    Attributes:
        layer_sizes: ``(d_x, hidden..., d_y)``. A single entry describes the
            parameter-free identity map.
        activation: Hidden activation: ``relu``, ``tanh`` or ``identity``.
        head: ``softmax-ce`` for classification, ``mse`` for regression.
        init_seed: Seed for weight initialization.
        noise_scale: Gaussian noise std σ of the regression likelihood; required for
            Fisher information on the ``mse`` head.
    """

    layer_sizes: Tuple[int, ...]
    activation: str = "tanh"
    head: str = "softmax-ce"
    init_seed: int = 0
    noise_scale: Optional[float] = None

    def __post_init__(self) -> None:
        sizes = tuple(int(s) for s in self.layer_sizes)
        object.__setattr__(self, "layer_sizes", sizes)
        if not sizes:
            raise ContractError("layer_sizes needs at least one entry")
        if any(s < 1 for s in sizes):
            raise ContractError(f"layer sizes must be positive, got {sizes}")
        if self.activation not in ACTIVATIONS:
            raise ContractError(
                f"unknown activation '{self.activation}', expected one of {ACTIVATIONS}"
            )
        if self.head not in HEADS:
            raise ContractError(f"unknown head '{self.head}', expected one of {HEADS}")
        if self.head == "softmax-ce" and len(sizes) > 1 and sizes[-1] < 2:
            raise ContractError("softmax-ce head needs at least two classes")
        if self.noise_scale is not None and self.noise_scale <= 0:
            raise ContractError("noise_scale must be positive")

    @property
    def input_dim(self) -> int:
        return self.layer_sizes[0]

    @property
    def output_dim(self) -> int:
        return self.layer_sizes[-1]

    @property
    def n_layers(self) -> int:
        return len(self.layer_sizes) - 1

    def segment_shapes(self) -> List[Tuple[str, Tuple[int, ...]]]:
        """Segment names and shapes in registry order (weights are ``out × in``)."""
        shapes: List[Tuple[str, Tuple[int, ...]]] = []
        for i, (fan_in, fan_out) in enumerate(
            zip(self.layer_sizes[:-1], self.layer_sizes[1:]), start=1
        ):
            shapes.append((f"layer{i}.weight", (fan_out, fan_in)))
            shapes.append((f"layer{i}.bias", (fan_out,)))
        return shapes

    @property
    def n_params(self) -> int:
        return sum(int(np.prod(shape)) for _, shape in self.segment_shapes())


@dataclass(frozen=True)
class DomainDataset:
    """Labeled samples drawn from one domain.

    Attributes:
        domain_id: Domain identifier.
        features: ``n × d_x`` float64 matrix.
        labels: Integer class per row (classification) or ``n × d_y`` targets.
        n_classes: Number of classes for classification data, else None.
    """

    domain_id: str
    features: Tensor
    labels: np.ndarray
    n_classes: Optional[int] = None

    def __post_init__(self) -> None:
        features = _frozen_array(self.features)
        if features.ndim == 1:
            features = features.reshape(-1, 1)
            features.setflags(write=False)
        if features.ndim != 2 or features.shape[0] < 1:
            raise DataError(f"domain '{self.domain_id}' needs at least one sample")
        if not np.all(np.isfinite(features)):
            raise DataError(f"domain '{self.domain_id}' has non-finite features")
        n = features.shape[0]

        if self.n_classes is not None:
            labels = np.asarray(self.labels)
            if labels.ndim != 1 or labels.shape[0] != n:
                raise DataError(
                    f"domain '{self.domain_id}': expected {n} class labels, got shape {labels.shape}"
                )
            if labels.size and not np.all(np.equal(np.mod(labels, 1), 0)):
                raise DataError(f"domain '{self.domain_id}': class labels must be integers")
            labels = _frozen_array(labels, dtype=np.int64)
            if np.any(labels < 0) or np.any(labels >= self.n_classes):
                raise DataError(
                    f"domain '{self.domain_id}': class labels must lie in [0, {self.n_classes})"
                )
        else:
            labels = _frozen_array(self.labels)
            if labels.ndim == 1:
                labels = labels.reshape(-1, 1)
                labels.setflags(write=False)
            if labels.shape[0] != n:
                raise DataError(
                    f"domain '{self.domain_id}': expected {n} targets, got {labels.shape[0]}"
                )
        object.__setattr__(self, "features", features)
        object.__setattr__(self, "labels", labels)

    @property
    def n_samples(self) -> int:
        return int(self.features.shape[0])

    @property
    def n_features(self) -> int:
        return int(self.features.shape[1])

    @property
    def is_classification(self) -> bool:
        return self.n_classes is not None

    def subset(self, indices) -> "DomainDataset":
        idx = np.asarray(indices, dtype=np.int64)
        return DomainDataset(
            domain_id=self.domain_id,
            features=self.features[idx],
            labels=self.labels[idx],
            n_classes=self.n_classes,
        )


@dataclass(frozen=True)
class SyntheticSpec:
    """Recipe for the multi-domain synthetic task.

    Invariant features are standard normal in every domain; spurious features are
    scaled per domain, optionally carry a leaked copy of the label and are optionally
    rotated by a per-domain orthogonal matrix. Labels depend on invariant features only.

    Attributes:
        n_domains: Number of domains D (at least two).
        samples_per_domain: Rows generated per domain.
        invariant_dim: Width of the invariant block.
        spurious_dim: Width of the spurious block.
        spurious_scales: Per-domain std of the spurious block.
        rotation_seeds: Per-domain rotation seed, ``None`` entries mean no rotation.
        leak_strengths: Per-domain α added as ``α·label`` to the first spurious column.
        label_weights: Linear label rule on the invariant block; drawn from the seed
            when omitted.
        label_noise: Std of Gaussian noise added to the linear score.
        task: ``classification`` (binary, label = score > 0) or ``regression``.
        seed: Master seed.
    """

    n_domains: int = 3
    samples_per_domain: int = 1000
    invariant_dim: int = 2
    spurious_dim: int = 2
    spurious_scales: Tuple[float, ...] = (1.0, 2.0, 4.0)
    rotation_seeds: Optional[Tuple[Optional[int], ...]] = None
    leak_strengths: Tuple[float, ...] = (0.0, 0.0, 0.0)
    label_weights: Optional[Tuple[float, ...]] = None
    label_noise: float = 0.0
    task: str = "classification"
    seed: int = 0

    def __post_init__(self) -> None:
        object.__setattr__(self, "spurious_scales", tuple(float(s) for s in self.spurious_scales))
        object.__setattr__(self, "leak_strengths", tuple(float(a) for a in self.leak_strengths))
        if self.rotation_seeds is not None:
            object.__setattr__(self, "rotation_seeds", tuple(self.rotation_seeds))
        if self.label_weights is not None:
            object.__setattr__(self, "label_weights", tuple(float(w) for w in self.label_weights))

        if self.n_domains < 2:
            raise ContractError("a synthetic task needs at least two domains")
        if self.samples_per_domain < 1 or self.invariant_dim < 1 or self.spurious_dim < 1:
            raise ContractError("sample count and block dimensions must be at least 1")
        if len(self.spurious_scales) != self.n_domains:
            raise ContractError("spurious_scales needs one entry per domain")
        if any(s <= 0 for s in self.spurious_scales):
            raise ContractError("spurious scale factors must be positive")
        if len(self.leak_strengths) != self.n_domains:
            raise ContractError("leak_strengths needs one entry per domain")
        if self.rotation_seeds is not None and len(self.rotation_seeds) != self.n_domains:
            raise ContractError("rotation_seeds needs one entry per domain")
        if self.label_weights is not None and len(self.label_weights) != self.invariant_dim:
            raise ContractError("label_weights needs one entry per invariant feature")
        if self.label_noise < 0:
            raise ContractError("label_noise must be non-negative")
        if self.task not in TASKS:
            raise ContractError(f"unknown task '{self.task}', expected one of {TASKS}")

    @property
    def n_features(self) -> int:
        return self.invariant_dim + self.spurious_dim


@dataclass(frozen=True)
class PerturbationSpec:
    """Covariances of centered input/parameter perturbations.

    The stored covariances are multiplied by ``scale²`` when sampled or propagated,
    so one shape can be reused at several perturbation sizes.

    Attributes:
        input_cov: Σ_x as a diagonal vector (d_x) or a full matrix (d_x × d_x).
        param_cov: Σ_θ as a diagonal vector (d_θ) or a full matrix (d_θ × d_θ).
        cross_cov: Optional Σ_xθ (d_x × d_θ).
        samples: Monte-Carlo sample count for the oracles.
        scale: Multiplier applied to the perturbation standard deviations.
    """

    input_cov: Tensor
    param_cov: Tensor
    cross_cov: Optional[Tensor] = None
    samples: int = 200_000
    scale: float = 1.0

    def __post_init__(self) -> None:
        object.__setattr__(self, "input_cov", check_covariance(self.input_cov, "input_cov"))
        object.__setattr__(self, "param_cov", check_covariance(self.param_cov, "param_cov"))
        if self.cross_cov is not None:
            cross = _frozen_array(self.cross_cov)
            if cross.shape != (self.input_dim, self.param_dim):
                raise DimensionError(
                    f"cross_cov: expected shape {(self.input_dim, self.param_dim)}, "
                    f"got {cross.shape}"
                )
            object.__setattr__(self, "cross_cov", cross)
        if self.samples < 2:
            raise ContractError("Monte-Carlo sample count must be at least 2")
        if self.scale <= 0:
            raise ContractError("perturbation scale must be positive")

    @property
    def input_dim(self) -> int:
        return int(self.input_cov.shape[0])

    @property
    def param_dim(self) -> int:
        return int(self.param_cov.shape[0])

    def covariances(self) -> Tuple[Tensor, Tensor, Optional[Tensor]]:
        """``(Σ_x, Σ_θ, Σ_xθ)`` at the configured scale."""
        factor = self.scale**2
        cross = None if self.cross_cov is None else factor * self.cross_cov
        return factor * self.input_cov, factor * self.param_cov, cross

    def joint_covariance(self) -> Tensor:
        """Dense covariance of the stacked ``(δx, δθ)`` vector at the configured scale."""
        sigma_x, sigma_theta, cross = self.covariances()
        d_x = self.input_dim
        joint = np.zeros((d_x + self.param_dim, d_x + self.param_dim))
        joint[:d_x, :d_x] = np.diag(sigma_x) if sigma_x.ndim == 1 else sigma_x
        joint[d_x:, d_x:] = np.diag(sigma_theta) if sigma_theta.ndim == 1 else sigma_theta
        if cross is not None:
            joint[:d_x, d_x:] = cross
            joint[d_x:, :d_x] = cross.T
        return joint


def check_covariance(cov, name: str, *, atol: float = 1e-10) -> Tensor:
    """Validate a diagonal (1-D) or full (2-D) covariance and return a frozen copy.

    Raises:
        DataError: If a diagonal entry is negative or a full matrix is not symmetric.
    """
    array = _frozen_array(cov)
    if array.ndim == 1:
        if np.any(array < 0):
            raise DataError(f"{name}: negative variance on the diagonal")
        return array
    if array.ndim != 2 or array.shape[0] != array.shape[1]:
        raise DataError(f"{name}: expected a vector or a square matrix, got {array.shape}")
    if np.any(np.diag(array) < 0):
        raise DataError(f"{name}: negative variance on the diagonal")
    scale = max(1.0, float(np.max(np.abs(array))) if array.size else 1.0)
    if not np.allclose(array, array.T, rtol=0.0, atol=atol * scale):
        raise DataError(f"{name}: covariance matrix is not symmetric")
    return array


@dataclass(frozen=True)
class SensitivityReport:
    """Per-parameter, per-domain sensitivities and their cross-domain dispersion.

    Attributes:
        per_domain: ``d_θ × D`` matrix of s_k^(d).
        mean: s̄_k, length d_θ.
        variance: v_k (population variance over domains), length d_θ.
        cv: c_k = sqrt(v_k) / (s̄_k + ε), length d_θ.
        epsilon: ε used for c_k.
        mode: Estimator tag (``jacobian``, ``loss-grad`` or ``loss-grad-batch``).
        segments: Registry snapshot used to attribute rows to layers.
        domain_ids: Column labels.
        issues: Non-fatal findings (e.g. dead parameters).
    """

    per_domain: Tensor
    mean: Tensor
    variance: Tensor
    cv: Tensor
    epsilon: float
    mode: str
    segments: Tuple[Segment, ...] = ()
    domain_ids: Tuple[str, ...] = ()
    issues: Tuple[AnalysisIssue, ...] = ()

    def __post_init__(self) -> None:
        for name in ("per_domain", "mean", "variance", "cv"):
            object.__setattr__(self, name, _frozen_array(getattr(self, name)))
        object.__setattr__(self, "segments", tuple(self.segments))
        object.__setattr__(self, "issues", tuple(self.issues))
        if not self.domain_ids:
            object.__setattr__(
                self, "domain_ids", tuple(str(d) for d in range(self.per_domain.shape[1]))
            )

    @property
    def n_params(self) -> int:
        return int(self.per_domain.shape[0])

    @property
    def n_domains(self) -> int:
        return int(self.per_domain.shape[1])

    def locate(self, index: int) -> Tuple[str, int]:
        """Return ``(segment, local index)`` for flat index k, or ``("", k)`` without registry."""
        for seg in self.segments:
            if seg.offset <= index < seg.stop:
                return seg.name, index - seg.offset
        return "", index


@dataclass(frozen=True)
class TrainConfig:
    """Inputs of one training run.

    Attributes:
        model: Architecture and init seed.
        lam: Regularization strength λ (``lambda`` in config files).
        t_update: Units between coefficient refreshes.
        update_unit: ``epoch`` or ``iteration``.
        learning_rate: Step size η.
        epochs: Number of passes over the mixed source data.
        batch_size: Mini-batch size for steps and per-domain refresh batches.
        coefficient_mode: ``dynamic``, ``static``, ``uniform`` or ``off``.
        estimator_mode: ``jacobian``, ``loss-grad`` or ``loss-grad-batch``.
        regularizer_gradient_mode: ``exact-hvp``, ``fd-hvp`` or ``stop-grad-weighted``.
        optimizer: ``gd`` or ``adam``.
        variance_mode: ``unit`` (Var(θ_k) = 1) or ``empirical`` (tracked over steps).
        variance_window: Number of recent steps the empirical variance covers.
        refresh_batch_size: Per-domain refresh batch size; ``None`` uses ``batch_size``.
        epsilon: ε in the coefficient of variation.
        seed: Seed for shuffling and refresh sampling.
        log_steps: Keep one record per optimizer step.
    """

    model: ModelSpec
    lam: float = 1e-3
    t_update: int = 2
    update_unit: str = "epoch"
    learning_rate: float = 0.05
    epochs: int = 20
    batch_size: int = 32
    coefficient_mode: str = "dynamic"
    estimator_mode: str = "jacobian"
    regularizer_gradient_mode: str = "stop-grad-weighted"
    optimizer: str = "gd"
    variance_mode: str = "unit"
    variance_window: int = 50
    refresh_batch_size: Optional[int] = None
    epsilon: float = 1e-8
    seed: int = 0
    log_steps: bool = False

    def __post_init__(self) -> None:
        choices = {
            "update_unit": ("epoch", "iteration"),
            "coefficient_mode": ("dynamic", "static", "uniform", "off"),
            "estimator_mode": ("jacobian", "loss-grad", "loss-grad-batch"),
            "regularizer_gradient_mode": ("exact-hvp", "fd-hvp", "stop-grad-weighted"),
            "optimizer": ("gd", "adam"),
            "variance_mode": ("unit", "empirical"),
        }
        for name, allowed in choices.items():
            if getattr(self, name) not in allowed:
                raise ContractError(
                    f"{name}='{getattr(self, name)}' is not one of {allowed}"
                )
        if self.lam < 0:
            raise ContractError("lambda must be non-negative")
        if self.t_update < 1:
            raise ContractError("t_update must be at least 1")
        if self.learning_rate <= 0:
            raise ContractError("learning_rate must be positive")
        if self.epochs < 0 or self.batch_size < 1:
            raise ContractError("epochs must be >= 0 and batch_size >= 1")
        if self.variance_window < 2:
            raise ContractError("variance_window must be at least 2")
        if self.refresh_batch_size is not None and self.refresh_batch_size < 1:
            raise ContractError("refresh_batch_size must be at least 1")
        if self.epsilon < 0:
            raise ContractError("epsilon must be non-negative")

    @property
    def regularized(self) -> bool:
        return self.lam > 0 and self.coefficient_mode != "off"

    @property
    def run_mode(self) -> str:
        """Label used in summaries: ``erm`` when the regularizer is inert."""
        return self.coefficient_mode if self.regularized else "erm"


@dataclass
class EpochRecord:
    """Metrics of one completed epoch.

    Attributes:
        epoch: 0-based epoch index.
        train_loss: Mean total loss (L_sup + λ·R_DS) over the epoch's steps.
        train_sup_loss: Mean supervised loss over the epoch's steps.
        reg_value: Mean R_DS over the epoch's steps.
        source_loss: Supervised loss on the union of source domains after the epoch.
        domain_metrics: Per source-domain validation metrics.
        heldout_metrics: Metrics on the held-out domain.
        seconds: Wall-clock time of the epoch.
        refresh_seconds: Part of ``seconds`` spent refreshing coefficients.
        steps: Optimizer steps taken in the epoch.
    """

    epoch: int
    train_loss: float
    train_sup_loss: float
    reg_value: float
    source_loss: float
    domain_metrics: Dict[str, Dict[str, float]] = field(default_factory=dict)
    heldout_metrics: Dict[str, float] = field(default_factory=dict)
    seconds: float = 0.0
    refresh_seconds: float = 0.0
    steps: int = 0

    @property
    def step_seconds(self) -> float:
        return max(0.0, self.seconds - self.refresh_seconds)


@dataclass(frozen=True)
class StepRecord:
    epoch: int
    step: int
    sup_loss: float
    reg_value: float
    grad_norm_sq: float


@dataclass(frozen=True)
class CoefficientSnapshot:
    """Coefficients c_k installed at a refresh.

    Attributes:
        epoch: Epoch in which the refresh happened.
        step: Global step count at the refresh.
        coefficients: The c_k vector.
        report: Full sensitivity report behind the coefficients.
    """

    epoch: int
    step: int
    coefficients: Tensor
    report: Optional[SensitivityReport] = None


@dataclass
class RunMetrics:
    """Append-only record of a training run.

    Attributes:
        mode: Run label (``dynamic``, ``static``, ``uniform`` or ``erm``).
        records: One EpochRecord per completed epoch.
        snapshots: Coefficient snapshots, in refresh order.
        steps: Per-step records when step logging is on.
        issues: Non-fatal findings collected during the run.
        final_heldout: Held-out metrics of the final parameters.
    """

    mode: str = "erm"
    records: List[EpochRecord] = field(default_factory=list)
    snapshots: List[CoefficientSnapshot] = field(default_factory=list)
    steps: List[StepRecord] = field(default_factory=list)
    issues: List[AnalysisIssue] = field(default_factory=list)
    final_heldout: Dict[str, float] = field(default_factory=dict)

    def add_record(self, record: EpochRecord) -> None:
        self.records.append(record)

    def add_snapshot(self, snapshot: CoefficientSnapshot) -> None:
        self.snapshots.append(snapshot)

    def add_step(self, step: StepRecord) -> None:
        self.steps.append(step)

    @property
    def refresh_epochs(self) -> List[int]:
        return [snap.epoch for snap in self.snapshots]

    @property
    def total_steps(self) -> int:
        return sum(r.steps for r in self.records)

    def iterations_per_second(self) -> float:
        seconds = sum(r.seconds for r in self.records)
        return self.total_steps / seconds if seconds > 0 else 0.0


@dataclass
class SegmentNode:
    """A layer or segment in the parameter attribution hierarchy.

    Attributes:
        name: Node name (``layer1`` or ``layer1.weight``).
        path: Dotted path from the root (root path is ``""``).
        children: Child nodes keyed by name.
        parameter_indices: Flat indices attached directly to this node.
        _stats: Cached accumulated statistics (computed lazily).
    """

    name: str
    path: str
    children: Dict[str, "SegmentNode"] = field(default_factory=dict)
    parameter_indices: List[int] = field(default_factory=list)
    _stats: Optional[Dict[str, float]] = field(default=None, init=False, repr=False)

    def all_indices(self) -> List[int]:
        indices = list(self.parameter_indices)
        for child in self.children.values():
            indices.extend(child.all_indices())
        return indices

    def invalidate_stats_cache(self) -> None:
        self._stats = None
        for child in self.children.values():
            child.invalidate_stats_cache()


@dataclass(frozen=True)
class LodoSplit:
    """One leave-one-domain-out split.

    Attributes:
        index: Position of the held-out domain in the original sequence.
        train: Source domains, in original order.
        held_out: The unseen target domain.
    """

    index: int
    train: Tuple[DomainDataset, ...]
    held_out: DomainDataset


@dataclass
class AblationRun:
    """One configuration of the ablation protocol and its outcome.

    Attributes:
        run_id: Stable identifier, e.g. ``dynamic-lam0.001-t2``.
        config: Effective training configuration.
        params: Final parameters.
        metrics: Recorded run metrics.
        selected_lambda: λ of the full method in the same suite, tuned or fixed.
    """

    run_id: str
    config: TrainConfig
    params: ParameterVector
    metrics: RunMetrics
    selected_lambda: Optional[float] = None

    @property
    def mode(self) -> str:
        return self.config.run_mode

    @property
    def heldout_metric(self) -> float:
        return float(self.metrics.final_heldout.get("loss", float("nan")))


@dataclass(frozen=True)
class CheckResult:
    """Outcome of one validation check.

    Attributes:
        name: Check name, e.g. ``gradients``.
        passed: Whether the measured error stayed within tolerance.
        measured: Worst measured error (or statistic) over all trials.
        tolerance: Bound the measured value was compared against.
        seconds: Wall-clock duration.
        details: Per-check extras (trial counts, medians, ...).
    """

    name: str
    passed: bool
    measured: float
    tolerance: float
    seconds: float = 0.0
    details: Dict[str, object] = field(default_factory=dict)
