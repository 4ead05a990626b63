"""YAML experiment configuration.

A config file has up to five sections::

    dataset:     {synthetic: {...}} or {csv: [paths...]}, task, validation_fraction
    model:       layer_sizes, activation, head, init_seed, noise_scale
    train:       lambda, t_update, update_unit, learning_rate, epochs, ..., seeds
    validation:  oracle sample counts, trial counts, checks, fault_injection
    output:      root

Missing keys take their defaults; unknown keys are rejected.
"""

from __future__ import annotations

import os
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Any, Dict, Mapping, Optional, Sequence, Tuple

import yaml

from ._errors import ContractError, ParseError
from ._models import ModelSpec, SyntheticSpec, TrainConfig
from ._persistence import write_lines

OUTPUT_ROOT_ENV = "DSP_REG_OUTPUT_ROOT"
CHECK_NAMES = (
    "gradients",
    "covariance",
    "decomposition",
    "sensitivity_index",
    "fisher",
    "separation",
    "contamination",
)
SECTIONS = ("dataset", "model", "train", "validation", "output")
_COUNT_FIELDS = (
    "mc_samples",
    "gradient_trials",
    "covariance_trials",
    "decomposition_trials",
    "contamination_trials",
    "separation_samples",
    "separation_seeds",
)


def default_output_root() -> str:
    return os.environ.get(OUTPUT_ROOT_ENV, "runs")


@dataclass(frozen=True)
class DatasetConfig:
    """Where domain data comes from.

    Attributes:
        synthetic: Generator recipe; used when no CSV paths are given.
        csv_paths: CSV files (``domain,label,f0,...``), resolved against the config file.
        task: ``auto``, ``classification`` or ``regression`` for CSV input.
        validation_fraction: Share of each training domain held back for validation.
    """

    synthetic: Optional[SyntheticSpec] = field(
        default_factory=lambda: SyntheticSpec(
            samples_per_domain=500,
            leak_strengths=(2.0, 1.0, 0.0),
            label_noise=0.1,
        )
    )
    csv_paths: Tuple[str, ...] = ()
    task: str = "auto"
    validation_fraction: float = 0.2

    def __post_init__(self) -> None:
        if not 0.0 <= self.validation_fraction < 1.0:
            raise ContractError("validation_fraction must lie in [0, 1)")
        if self.task not in ("auto", "classification", "regression"):
            raise ContractError(f"unknown task '{self.task}'")


@dataclass(frozen=True)
class ValidationConfig:
    """Oracle suite settings.

    Attributes:
        checks: Names of the checks to run.
        mc_samples: Monte-Carlo samples for covariance checks.
        perturbation_scale: Perturbation std relative to parameter RMS.
        gradient_trials: Random models in the gradient check.
        covariance_trials: Random models in the covariance check.
        decomposition_trials: Random cases in the decomposition check.
        contamination_trials: Random Σ_θ in the contamination check.
        separation_samples: Samples per domain in the separation check.
        separation_seeds: Seeds in the separation check.
        seed: Master seed of the suite.
        fault_injection: ``gradient`` corrupts the gradient under test.
    """

    checks: Tuple[str, ...] = CHECK_NAMES
    mc_samples: int = 200_000
    perturbation_scale: float = 1e-3
    gradient_trials: int = 20
    covariance_trials: int = 5
    decomposition_trials: int = 20
    contamination_trials: int = 100
    separation_samples: int = 10_000
    separation_seeds: int = 5
    seed: int = 0
    fault_injection: Optional[str] = None

    def __post_init__(self) -> None:
        unknown = set(self.checks) - set(CHECK_NAMES)
        if unknown:
            raise ContractError(f"unknown validation checks: {sorted(unknown)}")
        if self.fault_injection not in (None, "gradient"):
            raise ContractError("fault_injection must be 'gradient' or null")
        for name in _COUNT_FIELDS:
            if getattr(self, name) < 1:
                raise ContractError(f"{name} must be at least 1")
        if self.mc_samples < 2:
            raise ContractError("mc_samples must be at least 2")
        if self.perturbation_scale <= 0:
            raise ContractError("perturbation_scale must be positive")


@dataclass(frozen=True)
class OutputConfig:
    root: str = field(default_factory=default_output_root)


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything one experiment needs.

    Attributes:
        dataset: Data source.
        train: Training configuration (includes the model).
        seeds: Training seeds; one run per seed.
        validation: Oracle suite settings.
        output: Output root directory.
        source_path: File the config was loaded from, if any.
    """

    dataset: DatasetConfig
    train: TrainConfig
    seeds: Tuple[int, ...] = (0,)
    validation: ValidationConfig = field(default_factory=ValidationConfig)
    output: OutputConfig = field(default_factory=OutputConfig)
    source_path: Optional[str] = None

    @property
    def model(self) -> ModelSpec:
        return self.train.model


def default_config() -> ExperimentConfig:
    dataset = DatasetConfig()
    synthetic = dataset.synthetic
    model = ModelSpec(layer_sizes=(synthetic.n_features, 8, 2), activation="tanh")
    return ExperimentConfig(dataset=dataset, train=TrainConfig(model=model))


# Parsing -------------------------------------------------------------------

_TRAIN_KEYS = {
    f.name: f.name for f in fields(TrainConfig) if f.name not in ("model", "lam", "seed")
}
_TRAIN_KEYS["lambda"] = "lam"


def _section(raw: Mapping[str, Any], name: str, path: Optional[str]) -> Dict[str, Any]:
    value = raw.get(name) or {}
    if not isinstance(value, Mapping):
        raise ParseError(f"section '{name}' must be a mapping", path=path)
    return dict(value)


def _reject_unknown(section: str, values: Mapping[str, Any], allowed, path: Optional[str]) -> None:
    for key in values:
        if key not in allowed:
            raise ParseError(f"unknown key '{section}.{key}'", path=path)


def _tuple(value, section: str, key: str, path: Optional[str]) -> Tuple:
    if value is None:
        return None
    if not isinstance(value, (list, tuple)):
        raise ParseError(f"'{section}.{key}' must be a list", path=path)
    return tuple(value)


_INTEGER_KEYS = {
    "dataset.synthetic": ("n_domains", "samples_per_domain", "invariant_dim", "spurious_dim", "seed"),
    "model": ("init_seed",),
    "train": ("t_update", "epochs", "batch_size", "variance_window", "refresh_batch_size"),
    "validation": _COUNT_FIELDS + ("seed",),
}


def _require_integers(section: str, values: Mapping[str, Any], path: Optional[str]) -> None:
    for key in _INTEGER_KEYS[section]:
        value = values.get(key)
        if value is None:
            continue
        if isinstance(value, bool) or not isinstance(value, int):
            raise ParseError(f"'{section}.{key}' must be an integer, got {value!r}", path=path)


def _build(section: str, factory, path: Optional[str], **kwargs):
    """Construct a config dataclass, reporting bad value types as ParseError."""
    try:
        return factory(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ParseError(f"{section}: {exc}", path=path) from exc


def _parse_synthetic(values: Mapping[str, Any], path: Optional[str]) -> SyntheticSpec:
    allowed = {f.name for f in fields(SyntheticSpec)}
    _reject_unknown("dataset.synthetic", values, allowed, path)
    _require_integers("dataset.synthetic", values, path)
    kwargs = dict(values)
    for key in ("spurious_scales", "rotation_seeds", "leak_strengths", "label_weights"):
        if key in kwargs:
            kwargs[key] = _tuple(kwargs[key], "dataset.synthetic", key, path)
    n_domains = kwargs.get("n_domains", 3)
    if "spurious_scales" not in kwargs and n_domains != 3:
        kwargs["spurious_scales"] = tuple(float(2**d) for d in range(n_domains))
    if "leak_strengths" not in kwargs and n_domains != 3:
        kwargs["leak_strengths"] = (0.0,) * n_domains
    return _build("dataset.synthetic", SyntheticSpec, path, **kwargs)


def _parse_dataset(values: Dict[str, Any], path: Optional[str]) -> DatasetConfig:
    _reject_unknown("dataset", values, {"synthetic", "csv", "task", "validation_fraction"}, path)
    csv_paths = _tuple(values.get("csv"), "dataset", "csv", path) or ()
    base = os.path.dirname(os.path.abspath(path)) if path else os.getcwd()
    resolved = []
    for entry in csv_paths:
        full = entry if os.path.isabs(entry) else os.path.join(base, entry)
        if not os.path.exists(full):
            raise ParseError(f"dataset.csv: file not found: {entry}", path=path)
        resolved.append(full)
    synthetic = None
    if not resolved:
        synthetic_values = values.get("synthetic")
        if synthetic_values is not None and not isinstance(synthetic_values, Mapping):
            raise ParseError("'dataset.synthetic' must be a mapping", path=path)
        synthetic = (
            _parse_synthetic(synthetic_values, path)
            if synthetic_values is not None
            else DatasetConfig().synthetic
        )
    try:
        validation_fraction = float(values.get("validation_fraction", 0.2))
    except (TypeError, ValueError) as exc:
        raise ParseError("dataset.validation_fraction: expected a number", path=path) from exc
    return DatasetConfig(
        synthetic=synthetic,
        csv_paths=tuple(resolved),
        task=str(values.get("task", "auto")),
        validation_fraction=validation_fraction,
    )


def _parse_model(values: Dict[str, Any], path: Optional[str], default_input: int) -> ModelSpec:
    allowed = {f.name for f in fields(ModelSpec)}
    _reject_unknown("model", values, allowed, path)
    _require_integers("model", values, path)
    kwargs = dict(values)
    kwargs["layer_sizes"] = _tuple(
        kwargs.get("layer_sizes", [default_input, 8, 2]), "model", "layer_sizes", path
    )
    if kwargs.get("noise_scale") is not None:
        try:
            kwargs["noise_scale"] = float(kwargs["noise_scale"])
        except (TypeError, ValueError) as exc:
            raise ParseError("model.noise_scale: expected a number", path=path) from exc
    return _build("model", ModelSpec, path, **kwargs)


def _parse_train(
    values: Dict[str, Any], model: ModelSpec, path: Optional[str]
) -> Tuple[TrainConfig, Tuple[int, ...]]:
    _reject_unknown("train", values, set(_TRAIN_KEYS) | {"seeds", "seed"}, path)
    _require_integers("train", values, path)
    kwargs = {_TRAIN_KEYS[k]: v for k, v in values.items() if k in _TRAIN_KEYS}
    if "seeds" in values:
        raw_seeds = _tuple(values["seeds"], "train", "seeds", path)
    else:
        raw_seeds = (values.get("seed", 0),)
    if not raw_seeds:
        raise ParseError("train.seeds must not be empty", path=path)
    if any(isinstance(s, bool) or not isinstance(s, int) for s in raw_seeds):
        raise ParseError(f"train.seeds must be integers, got {list(raw_seeds)}", path=path)
    seeds = tuple(raw_seeds)
    for key in ("lam", "learning_rate", "epsilon"):
        if key in kwargs:
            try:
                kwargs[key] = float(kwargs[key])
            except (TypeError, ValueError) as exc:
                raise ParseError(f"train.{key}: expected a number", path=path) from exc
    return _build("train", TrainConfig, path, model=model, seed=seeds[0], **kwargs), seeds


def _parse_validation(values: Dict[str, Any], path: Optional[str]) -> ValidationConfig:
    allowed = {f.name for f in fields(ValidationConfig)}
    _reject_unknown("validation", values, allowed, path)
    _require_integers("validation", values, path)
    kwargs = dict(values)
    if "checks" in kwargs:
        kwargs["checks"] = _tuple(kwargs["checks"], "validation", "checks", path)
    if "perturbation_scale" in kwargs:
        try:
            kwargs["perturbation_scale"] = float(kwargs["perturbation_scale"])
        except (TypeError, ValueError) as exc:
            raise ParseError("validation.perturbation_scale: expected a number", path=path) from exc
    return _build("validation", ValidationConfig, path, **kwargs)


def parse_config(raw: Any, *, path: Optional[str] = None) -> ExperimentConfig:
    """Build an ExperimentConfig from a ``yaml.safe_load`` result."""
    path = path or None
    if raw is None:
        raw = {}
    if not isinstance(raw, Mapping):
        raise ParseError("config must be a mapping of sections", path=path)
    for key in raw:
        if key not in SECTIONS:
            raise ParseError(f"unknown section '{key}'", path=path)
    dataset = _parse_dataset(_section(raw, "dataset", path), path)
    default_input = dataset.synthetic.n_features if dataset.synthetic is not None else 1
    model = _parse_model(_section(raw, "model", path), path, default_input)
    train, seeds = _parse_train(_section(raw, "train", path), model, path)
    validation = _parse_validation(_section(raw, "validation", path), path)
    output_values = _section(raw, "output", path)
    _reject_unknown("output", output_values, {"root"}, path)
    output = (
        OutputConfig(root=str(output_values["root"])) if "root" in output_values else OutputConfig()
    )
    return ExperimentConfig(
        dataset=dataset,
        train=train,
        seeds=seeds,
        validation=validation,
        output=output,
        source_path=path,
    )


def load_config(path: Optional[str]) -> ExperimentConfig:
    """Load a YAML config; ``None`` gives the built-in defaults.

    Raises:
        ParseError: Unreadable file, invalid YAML, unknown key or missing CSV path.
    """
    if path is None:
        return default_config()
    try:
        with open(path, "r", encoding="utf-8") as fh:
            raw = yaml.safe_load(fh)
    except OSError as exc:
        raise ParseError(f"cannot read config: {exc.strerror}", path=path) from exc
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        raise ParseError(
            f"invalid YAML: {getattr(exc, 'problem', exc)}",
            path=path,
            line=mark.line + 1 if mark is not None else None,
        ) from exc
    return parse_config(raw, path=path)


def apply_overrides(
    config: ExperimentConfig,
    *,
    seeds: Optional[Sequence[int]] = None,
    output_root: Optional[str] = None,
) -> ExperimentConfig:
    """Return a copy with CLI flag values taking precedence over file values."""
    if seeds:
        seeds = tuple(int(s) for s in seeds)
        config = replace(config, seeds=seeds, train=replace(config.train, seed=seeds[0]))
    if output_root:
        config = replace(config, output=OutputConfig(root=output_root))
    return config


def config_to_dict(config: ExperimentConfig) -> Dict[str, Any]:
    """The resolved config in the same layout the loader accepts."""
    train = asdict(config.train)
    model = train.pop("model")
    train["lambda"] = train.pop("lam")
    train.pop("seed")
    train["seeds"] = list(config.seeds)
    dataset: Dict[str, Any] = {
        "task": config.dataset.task,
        "validation_fraction": config.dataset.validation_fraction,
    }
    if config.dataset.csv_paths:
        dataset["csv"] = list(config.dataset.csv_paths)
    else:
        dataset["synthetic"] = asdict(config.dataset.synthetic)
    return _plain(
        {
            "dataset": dataset,
            "model": model,
            "train": train,
            "validation": asdict(config.validation),
            "output": {"root": config.output.root},
        }
    )


def _plain(value: Any) -> Any:
    if isinstance(value, Mapping):
        return {k: _plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    return value


def dump_config(config: ExperimentConfig) -> str:
    return yaml.safe_dump(config_to_dict(config), sort_keys=False)


def write_resolved_config(config: ExperimentConfig, output_path: str) -> None:
    write_lines(output_path, [dump_config(config)])
