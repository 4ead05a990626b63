"""``dsp-reg`` command line: generate, train, validate and ablate."""

from __future__ import annotations

import argparse
import logging
import os
import sys
from dataclasses import replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from rich.console import Console
from rich.logging import RichHandler
from rich.table import Table

from ._config import ExperimentConfig, apply_overrides, load_config, write_resolved_config
from ._errors import DspRegError, ProtocolError, ValidationFailure
from ._markdown import export_ablation_markdown, export_run_summary, summary_table_data
from ._models import AblationRun, DomainDataset, LodoSplit, ParameterVector, RunMetrics, TrainConfig
from ._persistence import (
    save_params,
    write_json,
    write_metrics_jsonl,
    write_sensitivity_csv,
    write_summary_csv,
)
from ._validation import run_validation, write_validation_report
from .analyzer import DomainSensitivityAnalyzer
from .domain_data import generate, load_csv, lodo_splits, split_validation, write_domains
from .trainer import (
    DEFAULT_LAMBDAS,
    ablation_suite,
    coefficient_drift,
    heldout_ordering,
    select_lambda,
    summary_rows,
    train,
)

logger = logging.getLogger(__name__)

LOG_LEVEL_ENV = "DSP_REG_LOG_LEVEL"
LOG_LEVELS = ("DEBUG", "INFO", "WARNING", "ERROR")


def configure_logging(level: str) -> None:
    logging.basicConfig(
        level=level.upper(),
        format="%(message)s",
        datefmt="[%X]",
        handlers=[RichHandler(console=Console(stderr=True), show_path=False)],
        force=True,
    )


# Data ------------------------------------------------------------------------


def load_domains(config: ExperimentConfig) -> List[DomainDataset]:
    """Domains named by the dataset section, in file or generator order."""
    if not config.dataset.csv_paths:
        return generate(config.dataset.synthetic)
    domains: List[DomainDataset] = []
    classification = config.model.head == "softmax-ce"
    n_classes = config.model.output_dim if classification else None
    task = config.dataset.task
    if task == "auto":
        task = "classification" if classification else "regression"
    for path in config.dataset.csv_paths:
        domains.extend(load_csv(path, task=task, n_classes=n_classes))
    ids = [d.domain_id for d in domains]
    if len(set(ids)) != len(ids):
        raise ProtocolError(f"domain ids repeat across CSV files: {ids}")
    return domains


def _select_splits(domains: Sequence[DomainDataset], split: Optional[int]) -> List[LodoSplit]:
    splits = lodo_splits(domains)
    if split is None:
        return splits
    if not 0 <= split < len(splits):
        raise ProtocolError(f"--split {split} is out of range for {len(splits)} domains")
    return [splits[split]]


def _fit_and_validation(
    config: ExperimentConfig, split: LodoSplit, seed: int
) -> Tuple[List[DomainDataset], Optional[List[DomainDataset]]]:
    fraction = config.dataset.validation_fraction
    if fraction <= 0:
        return list(split.train), None
    return split_validation(split.train, fraction, seed)


def _seeded(train_config: TrainConfig, seed: int) -> TrainConfig:
    """Shuffle seed and initialization both follow the run seed."""
    model = replace(train_config.model, init_seed=train_config.model.init_seed + seed)
    return replace(train_config, seed=seed, model=model)


# Run artifacts ---------------------------------------------------------------


def write_run(
    run_dir: str,
    experiment: ExperimentConfig,
    train_config: TrainConfig,
    params: ParameterVector,
    metrics: RunMetrics,
    *,
    split: int,
) -> None:
    """Persist one run: metrics, coefficient snapshots, parameters, summary and config."""
    write_metrics_jsonl(metrics, os.path.join(run_dir, "metrics.jsonl"))
    for snapshot in metrics.snapshots:
        if snapshot.report is not None:
            name = f"epoch{snapshot.epoch:03d}_step{snapshot.step:06d}.csv"
            write_sensitivity_csv(snapshot.report, os.path.join(run_dir, "sensitivity", name))
    save_params(params, os.path.join(run_dir, "params.npz"))
    export_run_summary(
        metrics,
        train_config,
        os.path.join(run_dir, "summary.md"),
        split=split,
        drift=coefficient_drift(metrics),
    )
    # The stored model keeps the base init seed; the run seed is re-applied on load.
    resolved = replace(
        experiment,
        train=replace(train_config, model=experiment.model),
        seeds=(train_config.seed,),
    )
    write_resolved_config(resolved, os.path.join(run_dir, "resolved_config.yaml"))


def heldout_summary(runs: Dict[int, Dict[str, float]]) -> Dict[str, object]:
    """Mean and population std of every held-out metric across seeds."""
    metrics = sorted({key for values in runs.values() for key in values})
    mean, std = {}, {}
    for key in metrics:
        values = np.asarray([runs[s][key] for s in runs if key in runs[s]])
        mean[key] = float(values.mean())
        std[key] = float(values.std())
    return {
        "seeds": sorted(runs),
        "runs": {str(s): runs[s] for s in sorted(runs)},
        "mean": mean,
        "std": std,
    }


# Commands --------------------------------------------------------------------


def cmd_generate(config: ExperimentConfig, args: argparse.Namespace, console: Console) -> None:
    synthetic = config.dataset.synthetic
    if synthetic is None:
        raise ProtocolError("generate needs a synthetic dataset section, not CSV input")
    if args.seed:
        synthetic = replace(synthetic, seed=int(args.seed[0]))
        config = replace(config, dataset=replace(config.dataset, synthetic=synthetic))
    output_dir = os.path.join(config.output.root, "data")
    files = write_domains(generate(synthetic), output_dir, spec=synthetic)
    write_resolved_config(config, os.path.join(output_dir, "resolved_config.yaml"))
    logger.info("wrote %d domains to %s", len(files), output_dir)
    console.print(f"Wrote {len(files)} domain files and manifest.json to: {output_dir}")


def cmd_train(config: ExperimentConfig, args: argparse.Namespace, console: Console) -> None:
    domains = load_domains(config)
    split_index = 0 if args.split is None else args.split
    (split,) = _select_splits(domains, split_index)
    split_dir = os.path.join(config.output.root, "train", f"split{split.index}")
    logger.info("split %d: holding out domain '%s'", split.index, split.held_out.domain_id)

    heldout: Dict[int, Dict[str, float]] = {}
    table = Table(title=f"Held-out domain {split.held_out.domain_id}")
    table.add_column("seed", justify="right")
    table.add_column("mode")
    table.add_column("lambda", justify="right")
    table.add_column("held-out loss", justify="right")
    table.add_column("it/s", justify="right")
    for seed in config.seeds:
        train_config = _seeded(config.train, seed)
        fit, validation = _fit_and_validation(config, split, seed)
        if args.select_lambda:
            best, _ = select_lambda(train_config, fit, DEFAULT_LAMBDAS, seed=seed)
            train_config = replace(train_config, lam=best)
        params, metrics = train(train_config, fit, split.held_out, validation=validation)
        run_dir = os.path.join(split_dir, f"seed{seed}")
        write_run(run_dir, config, train_config, params, metrics, split=split.index)
        if train_config.regularized:
            analyzer = DomainSensitivityAnalyzer(
                train_config.model,
                params,
                fit,
                mode=train_config.estimator_mode,
                epsilon=train_config.epsilon,
            )
            analyzer.export_markdown(os.path.join(run_dir, "sensitivity.md"))
        heldout[seed] = dict(metrics.final_heldout)
        table.add_row(
            str(seed),
            metrics.mode,
            f"{train_config.lam:g}",
            f"{metrics.final_heldout['loss']:.6g}",
            f"{metrics.iterations_per_second():.1f}",
        )
    summary = heldout_summary(heldout)
    summary["split"] = split.index
    summary["held_out"] = split.held_out.domain_id
    write_json(os.path.join(split_dir, "heldout_summary.json"), summary)
    console.print(table)
    loss_mean, loss_std = summary["mean"]["loss"], summary["std"]["loss"]
    console.print(f"Held-out loss over {len(heldout)} seed(s): {loss_mean:.6g} ± {loss_std:.3g}")


def cmd_validate(config: ExperimentConfig, args: argparse.Namespace, console: Console) -> None:
    results = run_validation(config.validation)
    report_path = os.path.join(config.output.root, "validation.json")
    write_validation_report(results, report_path)

    table = Table(title="Validation")
    table.add_column("check")
    table.add_column("result")
    table.add_column("measured", justify="right")
    table.add_column("tolerance", justify="right")
    table.add_column("seconds", justify="right")
    for r in results:
        table.add_row(
            r.name,
            "[green]pass[/green]" if r.passed else "[red]FAIL[/red]",
            f"{r.measured:.3g}",
            f"{r.tolerance:.3g}",
            f"{r.seconds:.2f}",
        )
    console.print(table)
    console.print(f"Wrote validation report to: {report_path}")

    failed = [r for r in results if not r.passed]
    if failed:
        details = "; ".join(f"{r.name}: measured {r.measured:.3g} vs {r.tolerance:.3g}" for r in failed)
        raise ValidationFailure(f"{len(failed)} check(s) failed: {details}")


def cmd_ablate(config: ExperimentConfig, args: argparse.Namespace, console: Console) -> None:
    domains = load_domains(config)
    root = os.path.join(config.output.root, "ablate")
    rows: List[Dict[str, object]] = []
    for split in _select_splits(domains, args.split):
        for seed in config.seeds:
            base = _seeded(config.train, seed)
            fit, validation = _fit_and_validation(config, split, seed)
            seed_dir = os.path.join(root, f"split{split.index}", f"seed{seed}")

            def persist(run: AblationRun, seed_dir=seed_dir, split=split) -> None:
                write_run(
                    os.path.join(seed_dir, run.run_id),
                    config,
                    run.config,
                    run.params,
                    run.metrics,
                    split=split.index,
                )

            logger.info("ablation: split %d, seed %d", split.index, seed)
            runs = ablation_suite(
                base,
                fit,
                split.held_out,
                validation=validation,
                tune_lambda=not args.fixed_lambda,
                on_run=persist,
            )
            rows.extend(summary_rows(runs, split=split.index))

    ordering = heldout_ordering(rows, config.train.lam, config.train.t_update)
    write_summary_csv(rows, os.path.join(root, "summary.csv"))
    write_json(os.path.join(root, "ordering.json"), ordering)
    export_ablation_markdown(rows, ordering, os.path.join(root, "summary.md"))
    write_resolved_config(config, os.path.join(root, "resolved_config.yaml"))

    cells = summary_table_data(rows)
    table = Table(title="Ablation summary")
    for column in cells:
        table.add_column(column)
    for i in range(len(rows)):
        table.add_row(*(cells[column][i] for column in cells))
    console.print(table)
    console.print(
        f"full <= uniform <= erm: {ordering['full_le_uniform_le_erm']}, "
        f"best lambda: {ordering['best_lambda']}"
    )


COMMANDS = {
    "generate": cmd_generate,
    "train": cmd_train,
    "validate": cmd_validate,
    "ablate": cmd_ablate,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dsp-reg",
        description="Domain-specific parameter sensitivity analysis and regularized training.",
    )
    parser.add_argument(
        "--log-level",
        choices=LOG_LEVELS,
        type=str.upper,
        default=os.environ.get(LOG_LEVEL_ENV, "INFO").upper(),
        help=f"Logging level (default: ${LOG_LEVEL_ENV} or INFO).",
    )
    subparsers = parser.add_subparsers(dest="command", required=True)
    help_text = {
        "generate": "Write synthetic domain CSVs and a manifest.",
        "train": "Train on one leave-one-domain-out split.",
        "validate": "Run the oracle suite.",
        "ablate": "Run the ablation protocol over splits and seeds.",
    }
    for name, text in help_text.items():
        sub = subparsers.add_parser(name, help=text)
        sub.add_argument("--config", help="YAML experiment config (defaults when omitted).")
        sub.add_argument("--out", help="Output root (overrides output.root).")
        sub.add_argument(
            "--seed",
            type=int,
            action="append",
            help="Seed; repeat for several runs (overrides train.seeds).",
        )
        if name in ("train", "ablate"):
            sub.add_argument("--split", type=int, help="Index of the held-out domain.")
        if name == "train":
            sub.add_argument(
                "--select-lambda",
                action="store_true",
                help="Pick lambda on a validation split of the training domains first.",
            )
        if name == "ablate":
            sub.add_argument(
                "--fixed-lambda",
                action="store_true",
                help="Use train.lambda for the full method instead of tuning it per split.",
            )
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    configure_logging(args.log_level)
    console = Console()
    try:
        config = load_config(args.config)
        seeds = args.seed if args.command != "generate" else None
        config = apply_overrides(config, seeds=seeds, output_root=args.out)
        COMMANDS[args.command](config, args, console)
    except DspRegError as exc:
        logger.error("%s: %s", type(exc).__name__, exc)
        return exc.exit_code
    except OSError as exc:
        logger.error("cannot write output: %s", exc)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
