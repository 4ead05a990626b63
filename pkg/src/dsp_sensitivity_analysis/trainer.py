"""Domain-sensitive regularized training and its ablations.

A run keeps coefficients ``c`` (initially 1), refreshes them from per-domain
sensitivities every ``t_update`` epochs (or iterations) and takes steps along
``∇L_sup + λ·∇R_DS`` where ``R_DS = Σ_k c_k (∂_{θ_k} L_sup)²`` on the current
mini-batch. ``c`` is a constant during differentiation.
"""

from __future__ import annotations

import logging
import time
from collections import deque
from dataclasses import dataclass, replace
from typing import Callable, Deque, Dict, List, Optional, Sequence, Tuple

import numpy as np

from ._errors import (
    ContractError,
    DimensionError,
    DivergenceError,
    NonFiniteError,
    ProtocolError,
)
from ._models import (
    AblationRun,
    CoefficientSnapshot,
    DomainDataset,
    EpochRecord,
    ParameterVector,
    RunMetrics,
    StepRecord,
    Tensor,
    TrainConfig,
)
from ._tape import TapeBuilder
from .autodiff import grad_params, hvp
from .domain_data import split_validation
from .models import evaluate, init_params, supervised_loss
from .sensitivity import domain_report

logger = logging.getLogger(__name__)

DEFAULT_LAMBDAS = (1e-4, 1e-3, 1e-2, 1e-1)
DEFAULT_T_UPDATES = (1, 2, 3, 4)


def ds_regularizer(c, g) -> float:
    """``R_DS = Σ_k c_k g_k²``."""
    c = np.asarray(c, dtype=np.float64).reshape(-1)
    g = np.asarray(g, dtype=np.float64).reshape(-1)
    if c.shape != g.shape:
        raise DimensionError(f"coefficients have length {c.size}, gradient has {g.size}")
    if np.any(c < 0):
        raise ContractError("regularizer coefficients must be non-negative")
    return float(np.sum(c * g**2))


def total_loss(sup_loss: float, reg_value: float, lam: float) -> float:
    if lam < 0:
        raise ContractError("lambda must be non-negative")
    return float(sup_loss + lam * reg_value)


@dataclass(frozen=True)
class RegularizerContext:
    """What the exact regularizer gradient needs to re-record the batch loss.

    Attributes:
        tape_builder: Returns ``(tape, loss node)`` of the current mini-batch loss.
        params: Current parameters.
    """

    tape_builder: TapeBuilder
    params: ParameterVector


def regularizer_gradient(
    c, context: RegularizerContext, g, mode: str = "stop-grad-weighted"
) -> Tensor:
    """Gradient of ``R_DS`` with ``c`` held constant.

    ``exact-hvp`` and ``fd-hvp`` return ``2·H·(c ⊙ g)`` with H the Hessian of the
    batch loss (forward-over-reverse or finite differences of gradients);
    ``stop-grad-weighted`` treats g as data and returns ``2·(c ⊙ g)``.

    Raises:
        CapabilityError: ``exact-hvp`` on a model with ReLU.
    """
    c = np.asarray(c, dtype=np.float64).reshape(-1)
    g = np.asarray(g, dtype=np.float64).reshape(-1)
    if c.shape != g.shape:
        raise DimensionError(f"coefficients have length {c.size}, gradient has {g.size}")
    weighted = c * g
    if mode == "stop-grad-weighted":
        return 2.0 * weighted
    if mode == "exact-hvp":
        return 2.0 * hvp(context.tape_builder, context.params, weighted, method="exact")
    if mode == "fd-hvp":
        return 2.0 * hvp(context.tape_builder, context.params, weighted, method="fd")
    raise ContractError(f"unknown regularizer gradient mode '{mode}'")


class GradientDescent:
    def __init__(self, learning_rate: float) -> None:
        self.learning_rate = learning_rate

    def step(self, values: Tensor, grad: Tensor) -> Tensor:
        return values - self.learning_rate * grad


class Adam:
    """Adam with bias-corrected moments (β1 = 0.9, β2 = 0.999, eps = 1e-8)."""

    def __init__(
        self, learning_rate: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8
    ) -> None:
        self.learning_rate = learning_rate
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m: Optional[Tensor] = None
        self.v: Optional[Tensor] = None
        self.t = 0

    def step(self, values: Tensor, grad: Tensor) -> Tensor:
        if self.m is None:
            self.m = np.zeros_like(values)
            self.v = np.zeros_like(values)
        self.t += 1
        self.m = self.beta1 * self.m + (1.0 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1.0 - self.beta2) * grad**2
        m_hat = self.m / (1.0 - self.beta1**self.t)
        v_hat = self.v / (1.0 - self.beta2**self.t)
        return values - self.learning_rate * m_hat / (np.sqrt(v_hat) + self.eps)


def make_optimizer(config: TrainConfig):
    if config.optimizer == "adam":
        return Adam(config.learning_rate)
    return GradientDescent(config.learning_rate)


class ParameterVarianceTracker:
    """Running per-coordinate variance of θ over the last ``window`` steps."""

    def __init__(self, window: int = 50) -> None:
        if window < 2:
            raise ContractError("variance window must be at least 2")
        self.window = window
        self._history: Deque[Tensor] = deque(maxlen=window)

    def __len__(self) -> int:
        return len(self._history)

    def push(self, values: Tensor) -> None:
        self._history.append(np.array(values, dtype=np.float64, copy=True))

    def variances(self) -> Optional[Tensor]:
        """Population variance over the window, or None with fewer than two entries."""
        if len(self._history) < 2:
            return None
        return np.var(np.stack(self._history), axis=0)


def _refresh_due(config: TrainConfig, counter: int, already_refreshed: bool) -> bool:
    if not config.regularized:
        return False
    if config.coefficient_mode == "dynamic":
        return counter % config.t_update == 0
    if config.coefficient_mode == "static":
        return not already_refreshed
    return False


def _check_domains(config: TrainConfig, domains: Sequence[DomainDataset]) -> None:
    for domain in domains:
        if domain.n_features != config.model.input_dim:
            raise DimensionError(
                f"layer1: domain '{domain.domain_id}' has {domain.n_features} features, "
                f"model expects {config.model.input_dim}"
            )


def _concat(domains: Sequence[DomainDataset]) -> DomainDataset:
    return DomainDataset(
        domain_id="+".join(d.domain_id for d in domains),
        features=np.vstack([d.features for d in domains]),
        labels=np.concatenate([d.labels for d in domains], axis=0),
        n_classes=domains[0].n_classes,
    )


class _Run:
    """Mutable state of one training run."""

    def __init__(
        self,
        config: TrainConfig,
        train_domains: Sequence[DomainDataset],
        held_out: Optional[DomainDataset],
        validation: Optional[Sequence[DomainDataset]],
        initial_params: Optional[ParameterVector],
    ) -> None:
        self.config = config
        self.spec = config.model
        self.train_domains = list(train_domains)
        self.held_out = held_out
        self.validation = list(validation) if validation is not None else None
        self.params = initial_params if initial_params is not None else init_params(self.spec)
        self.source = _concat(self.train_domains)
        shuffle_seed, refresh_seed = np.random.SeedSequence(config.seed).spawn(2)
        self.shuffle_rng = np.random.default_rng(shuffle_seed)
        self.refresh_rng = np.random.default_rng(refresh_seed)
        self.coefficients = np.ones(self.params.size)
        self.optimizer = make_optimizer(config)
        self.tracker = (
            ParameterVarianceTracker(config.variance_window)
            if config.variance_mode == "empirical"
            else None
        )
        if self.tracker is not None:
            self.tracker.push(self.params.values)
        self.metrics = RunMetrics(mode=config.run_mode)
        self.step = 0
        self.epoch = 0
        self._issue_codes: set = set()

    def _diverged(self, message: str) -> DivergenceError:
        return DivergenceError(
            message,
            lam=self.config.lam,
            learning_rate=self.config.learning_rate,
            epoch=self.epoch,
            step=self.step,
        )

    def refresh(self) -> float:
        start = time.perf_counter()
        size = self.config.refresh_batch_size or self.config.batch_size
        batches = []
        for domain in self.train_domains:
            take = min(size, domain.n_samples)
            batches.append(domain.subset(np.sort(self.refresh_rng.choice(domain.n_samples, take, replace=False))))
        variances = self.tracker.variances() if self.tracker is not None else None
        try:
            report = domain_report(
                self.spec,
                self.params,
                batches,
                variances=variances,
                mode=self.config.estimator_mode,
                epsilon=self.config.epsilon,
            )
        except NonFiniteError as exc:
            raise self._diverged("sensitivity refresh produced non-finite values") from exc
        self.coefficients = report.cv.copy()
        self.metrics.add_snapshot(
            CoefficientSnapshot(
                epoch=self.epoch, step=self.step, coefficients=self.coefficients.copy(), report=report
            )
        )
        for issue in report.issues:
            if issue.code not in self._issue_codes:
                self._issue_codes.add(issue.code)
                self.metrics.issues.append(issue)
        logger.info(
            "epoch %d step %d: refreshed coefficients (mean c=%.4g, max c=%.4g)",
            self.epoch,
            self.step,
            float(np.mean(self.coefficients)) if self.coefficients.size else 0.0,
            float(np.max(self.coefficients, initial=0.0)),
        )
        return time.perf_counter() - start

    def take_step(self, batch: Tuple[np.ndarray, np.ndarray]) -> Tuple[float, float, float]:
        config = self.config
        try:
            tape, loss = supervised_loss(self.spec, self.params, batch)
        except NonFiniteError as exc:
            raise self._diverged("training loss became non-finite") from exc
        sup = float(tape.value(loss))
        g = grad_params(tape, loss)
        reg = ds_regularizer(self.coefficients, g)
        if config.regularized:
            context = RegularizerContext(
                tape_builder=lambda p: supervised_loss(self.spec, p, batch),
                params=self.params,
            )
            try:
                direction = g + config.lam * regularizer_gradient(
                    self.coefficients, context, g, config.regularizer_gradient_mode
                )
            except NonFiniteError as exc:
                raise self._diverged("regularizer gradient became non-finite") from exc
            objective = total_loss(sup, reg, config.lam)
        else:
            direction = g
            objective = sup
        if not (np.isfinite(objective) and np.all(np.isfinite(direction))):
            raise self._diverged("training loss became non-finite")

        values = self.optimizer.step(self.params.values, direction)
        if not np.all(np.isfinite(values)):
            raise self._diverged("parameters became non-finite")
        self.params = self.params.with_values(values)
        if self.tracker is not None:
            self.tracker.push(values)

        grad_norm_sq = float(np.dot(g, g))
        if config.log_steps:
            self.metrics.add_step(
                StepRecord(
                    epoch=self.epoch, step=self.step, sup_loss=sup, reg_value=reg, grad_norm_sq=grad_norm_sq
                )
            )
        logger.debug("step %d: sup=%.6g reg=%.6g", self.step, sup, reg)
        self.step += 1
        return objective, sup, reg

    def domain_metrics(self) -> Dict[str, Dict[str, float]]:
        domains = self.validation if self.validation is not None else self.train_domains
        return {d.domain_id: evaluate(self.spec, self.params, d) for d in domains}

    def run_epoch(self) -> EpochRecord:
        config = self.config
        started = time.perf_counter()
        refresh_seconds = 0.0
        if config.update_unit == "epoch" and _refresh_due(
            config, self.epoch, bool(self.metrics.snapshots)
        ):
            refresh_seconds += self.refresh()

        order = self.shuffle_rng.permutation(self.source.n_samples)
        features, labels = self.source.features, self.source.labels
        totals, sups, regs = [], [], []
        steps_before = self.step
        for start in range(0, order.size, config.batch_size):
            if config.update_unit == "iteration" and _refresh_due(
                config, self.step, bool(self.metrics.snapshots)
            ):
                refresh_seconds += self.refresh()
            idx = order[start : start + config.batch_size]
            objective, sup, reg = self.take_step((features[idx], labels[idx]))
            totals.append(objective)
            sups.append(sup)
            regs.append(reg)

        try:
            source_loss = evaluate(self.spec, self.params, self.source)["loss"]
            heldout = evaluate(self.spec, self.params, self.held_out) if self.held_out else {}
            domain_metrics = self.domain_metrics()
        except NonFiniteError as exc:
            raise self._diverged("evaluation produced non-finite values") from exc
        record = EpochRecord(
            epoch=self.epoch,
            train_loss=float(np.mean(totals)) if totals else float("nan"),
            train_sup_loss=float(np.mean(sups)) if sups else float("nan"),
            reg_value=float(np.mean(regs)) if regs else float("nan"),
            source_loss=source_loss,
            domain_metrics=domain_metrics,
            heldout_metrics=heldout,
            seconds=time.perf_counter() - started,
            refresh_seconds=refresh_seconds,
            steps=self.step - steps_before,
        )
        self.metrics.add_record(record)
        logger.info(
            "epoch %d: loss=%.6g sup=%.6g reg=%.6g heldout=%s",
            self.epoch,
            record.train_loss,
            record.train_sup_loss,
            record.reg_value,
            f"{heldout['loss']:.6g}" if heldout else "-",
        )
        self.epoch += 1
        return record


def train(
    config: TrainConfig,
    train_domains: Sequence[DomainDataset],
    held_out: Optional[DomainDataset] = None,
    *,
    validation: Optional[Sequence[DomainDataset]] = None,
    initial_params: Optional[ParameterVector] = None,
) -> Tuple[ParameterVector, RunMetrics]:
    """Run the regularized training loop.

    Mini-batches are drawn from a global shuffle of the union of ``train_domains``.
    Coefficient refreshes use dedicated per-domain batches from a separate random
    stream, so runs that differ only in their refresh policy see identical batches.

    Args:
        config: Training configuration.
        train_domains: Source domains (at least two).
        held_out: Unseen target domain evaluated after every epoch.
        validation: Per-domain validation subsets; defaults to the training domains.
        initial_params: Start point; defaults to ``init_params(config.model)``.

    Raises:
        ProtocolError: Fewer than two training domains.
        DivergenceError: The loss or the parameters became non-finite.
    """
    if len(train_domains) < 2:
        raise ProtocolError(f"training needs at least two source domains, got {len(train_domains)}")
    _check_domains(config, train_domains)
    if held_out is not None:
        _check_domains(config, [held_out])
    run = _Run(config, train_domains, held_out, validation, initial_params)
    logger.info(
        "training mode=%s lambda=%g t_update=%d (%s) on %d source domains",
        config.run_mode,
        config.lam,
        config.t_update,
        config.update_unit,
        len(train_domains),
    )
    for _ in range(config.epochs):
        run.run_epoch()
    if held_out is not None:
        run.metrics.final_heldout = evaluate(config.model, run.params, held_out)
    return run.params, run.metrics


def _run_id(config: TrainConfig) -> str:
    return f"{config.run_mode}-lam{config.lam:g}-t{config.t_update}"


def ablation_configs(
    base: TrainConfig,
    *,
    lambdas: Sequence[float] = DEFAULT_LAMBDAS,
    t_updates: Sequence[int] = DEFAULT_T_UPDATES,
) -> List[TrainConfig]:
    """Full, λ = 0, uniform-c and static-c variants plus the λ and T_update sweeps.

    Duplicates (same mode, λ and T_update) are dropped, keeping the first.
    """
    full = replace(base, coefficient_mode="dynamic")
    candidates = [
        full,
        replace(full, lam=0.0),
        replace(full, coefficient_mode="uniform"),
        replace(full, coefficient_mode="static"),
        *[replace(full, lam=float(lam)) for lam in lambdas],
        *[replace(full, t_update=int(t)) for t in t_updates],
    ]
    seen = set()
    configs = []
    for config in candidates:
        key = (config.run_mode, config.lam, config.t_update)
        if key not in seen:
            seen.add(key)
            configs.append(config)
    return configs


def ablation_suite(
    base: TrainConfig,
    train_domains: Sequence[DomainDataset],
    held_out: Optional[DomainDataset] = None,
    *,
    lambdas: Sequence[float] = DEFAULT_LAMBDAS,
    t_updates: Sequence[int] = DEFAULT_T_UPDATES,
    validation: Optional[Sequence[DomainDataset]] = None,
    tune_lambda: bool = False,
    on_run: Optional[Callable[[AblationRun], None]] = None,
) -> List[AblationRun]:
    """Train every ablation variant with identical seeds.

    With ``tune_lambda`` the full method (and the uniform and static variants) use the
    λ that :func:`select_lambda` picks from ``lambdas`` on the validation domains.
    """
    if tune_lambda:
        best, _ = select_lambda(base, train_domains, lambdas, validation=validation, seed=base.seed)
        logger.info("selected lambda=%g for the full method", best)
        base = replace(base, lam=best)
    runs = []
    for config in ablation_configs(base, lambdas=lambdas, t_updates=t_updates):
        params, metrics = train(config, train_domains, held_out, validation=validation)
        run = AblationRun(
            run_id=_run_id(config),
            config=config,
            params=params,
            metrics=metrics,
            selected_lambda=base.lam,
        )
        runs.append(run)
        if on_run is not None:
            on_run(run)
    return runs


def select_lambda(
    base: TrainConfig,
    train_domains: Sequence[DomainDataset],
    candidates: Sequence[float] = DEFAULT_LAMBDAS,
    *,
    fraction: float = 0.2,
    seed: int = 0,
    validation: Optional[Sequence[DomainDataset]] = None,
) -> Tuple[float, Dict[float, float]]:
    """Pick λ by mean validation loss on held-back parts of the training domains.

    ``validation`` supplies the held-back parts directly; otherwise ``fraction`` of
    every training domain is split off with ``seed``.

    Returns:
        ``(best λ, {λ: mean validation loss})``; ties go to the earlier candidate.
    """
    if not candidates:
        raise ContractError("select_lambda needs at least one candidate")
    if validation:
        fit, held = list(train_domains), list(validation)
    else:
        fit, held = split_validation(train_domains, fraction, seed)
    scores: Dict[float, float] = {}
    for lam in candidates:
        params, _ = train(replace(base, lam=float(lam)), fit)
        losses = [evaluate(base.model, params, d)["loss"] for d in held]
        scores[float(lam)] = float(np.mean(losses))
        logger.info("lambda=%g: validation loss %.6g", lam, scores[float(lam)])
    best = min(scores, key=lambda lam: (scores[lam], list(scores).index(lam)))
    return best, scores


def coefficient_drift(metrics: RunMetrics) -> Dict[str, float]:
    """Compare the first and last coefficient snapshots of a run."""
    if not metrics.snapshots:
        return {}
    first = metrics.snapshots[0].coefficients
    last = metrics.snapshots[-1].coefficients
    if first.size == 0:
        return {"snapshots": float(len(metrics.snapshots))}
    return {
        "snapshots": float(len(metrics.snapshots)),
        "first_mean": float(np.mean(first)),
        "last_mean": float(np.mean(last)),
        "first_median": float(np.median(first)),
        "last_median": float(np.median(last)),
        "fraction_decreased": float(np.mean(last < first)),
    }


def summary_rows(runs: Sequence[AblationRun], *, split: int = 0) -> List[Dict[str, object]]:
    """Rows of the ablation summary table."""
    rows = []
    for run in runs:
        rows.append(
            {
                "run_id": run.run_id,
                "mode": run.mode,
                "lambda": float(run.config.lam),
                "t_update": run.config.t_update,
                "seed": run.config.seed,
                "split": split,
                "heldout_metric": run.heldout_metric,
                "iterations_per_second": float(run.metrics.iterations_per_second()),
                "selected_lambda": float(
                    run.config.lam if run.selected_lambda is None else run.selected_lambda
                ),
            }
        )
    return rows


def heldout_ordering(
    rows: Sequence[Dict[str, object]], base_lambda: float, base_t_update: int
) -> Dict[str, object]:
    """Mean held-out loss of the full, uniform-c and ERM rows and whether they are ordered.

    Only dynamic rows at ``base_t_update`` whose λ equals the row's ``selected_lambda``
    (``base_lambda`` when rows carry none) count as the full method. The λ sweep at
    ``base_t_update`` is summarized with its argmin and whether that argmin lies
    strictly inside the swept range.
    """
    def mean_of(predicate) -> float:
        values = [float(r["heldout_metric"]) for r in rows if predicate(r)]
        return float(np.mean(values)) if values else float("nan")

    full = mean_of(
        lambda r: r["mode"] == "dynamic"
        and float(r["lambda"]) == float(r.get("selected_lambda", base_lambda))
        and r["t_update"] == base_t_update
    )
    uniform = mean_of(lambda r: r["mode"] == "uniform")
    erm = mean_of(lambda r: r["mode"] == "erm")
    static = mean_of(lambda r: r["mode"] == "static")

    sweep: Dict[float, List[float]] = {}
    for r in rows:
        if r["mode"] == "dynamic" and r["t_update"] == base_t_update:
            sweep.setdefault(float(r["lambda"]), []).append(float(r["heldout_metric"]))
    lambdas = sorted(sweep)
    sweep_means = {lam: float(np.mean(sweep[lam])) for lam in lambdas}
    best = min(sweep_means, key=sweep_means.get) if sweep_means else None
    selected = sorted({float(r.get("selected_lambda", base_lambda)) for r in rows})
    return {
        "full": full,
        "uniform": uniform,
        "static": static,
        "erm": erm,
        "full_le_uniform_le_erm": bool(full <= uniform <= erm),
        "full_lt_erm": bool(full < erm),
        "lambda_sweep": {f"{lam:g}": v for lam, v in sweep_means.items()},
        "best_lambda": best,
        "selected_lambdas": selected,
        "interior_peak": bool(best is not None and len(lambdas) > 2 and best not in (lambdas[0], lambdas[-1])),
    }
