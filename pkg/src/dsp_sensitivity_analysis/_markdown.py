from __future__ import annotations

from typing import Any, Dict, Iterable, List, Literal, Mapping, Optional, Sequence

from ._models import RunMetrics, SegmentNode, SensitivityReport, TrainConfig
from ._param_hierarchy import ParameterHierarchy, accumulated_stats
from ._persistence import write_lines


def export_markdown(
    report: SensitivityReport,
    output_path: str,
    *,
    mode: Literal["segment", "parameter"] = "segment",
    top: int = 10,
) -> None:
    """Export a sensitivity report to Markdown.

    Args:
        report: Report to render.
        output_path: Path where the Markdown file will be written.
        mode: Hierarchy mode to use:
            - "segment": layers and their segments, sorted by mean c_k.
            - "parameter": the ``top`` parameters with the largest c_k.
        top: Number of parameters listed in "parameter" mode and under each layer.

    Raises:
        ValueError: If mode is not "segment" or "parameter".
    """
    if mode == "segment":
        _export_segment_hierarchy(report, output_path, top=top)
        return

    if mode == "parameter":
        lines = [f"# Most domain-sensitive parameters (top {top})\n\n"]
        lines.extend(_top_parameter_table(report, top))
        write_lines(output_path, lines)
        return

    raise ValueError("Unsupported markdown mode. Supported: 'segment' and 'parameter'.")


def _export_segment_hierarchy(report: SensitivityReport, output_path: str, *, top: int) -> None:
    root = ParameterHierarchy.from_report(report)
    lines: List[str] = []
    lines.append(
        f"# Parameter Sensitivity ({report.n_params} parameters, {report.n_domains} domains, "
        f"sorted by mean c)\n\n"
    )
    lines.append(
        f"**Estimator:** `{report.mode}`, epsilon = {report.epsilon:g}, "
        f"domains: {', '.join(report.domain_ids)}\n\n"
    )
    for issue in report.issues:
        lines.append(f"> {issue.code}: {issue.message}\n")
    if report.issues:
        lines.append("\n")

    layers = _sorted_by_score_then_name(
        root.children.values(),
        score_fn=lambda n: accumulated_stats(n, report)["mean_cv"],
        name_fn=lambda n: n.name,
    )
    if not layers:
        lines.append("_No parameters_\n")
    max_name_len = max((len(n.name) for n in layers), default=0)
    for layer in layers:
        stats = accumulated_stats(layer, report)
        lines.append(
            f"## {layer.name.ljust(max_name_len)} "
            f"({stats['count']} parameters, mean c: {stats['mean_cv']:.4g}, "
            f"max c: {stats['max_cv']:.4g}, mean s: {stats['mean_sensitivity']:.4g})\n\n"
        )
        _append_children(layer, report, lines)
        lines.append("\n")

    lines.append(f"## Top {top} parameters by c\n\n")
    lines.extend(_top_parameter_table(report, top))
    write_lines(output_path, lines)


def _append_children(node: SegmentNode, report: SensitivityReport, lines: List[str]) -> None:
    children = _sorted_by_score_then_name(
        node.children.values(),
        score_fn=lambda n: accumulated_stats(n, report)["mean_cv"],
        name_fn=lambda n: n.name,
    )
    names = [c.path for c in children]
    max_name_len = max((len(n) for n in names), default=0)
    for child, name in zip(children, names):
        stats = accumulated_stats(child, report)
        lines.append(
            f"- {name.ljust(max_name_len)}  "
            f"(count: {stats['count']}, mean c: {stats['mean_cv']:.4g}, "
            f"max c: {stats['max_cv']:.4g}, mean s: {stats['mean_sensitivity']:.4g})\n"
        )


def _top_parameter_table(report: SensitivityReport, top: int) -> List[str]:
    order = sorted(range(report.n_params), key=lambda k: (-float(report.cv[k]), k))[:top]
    lines = ["| index | segment | local | mean s | var s | c |\n", "|---|---|---|---|---|---|\n"]
    for k in order:
        segment, local = report.locate(k)
        lines.append(
            f"| {k} | {segment or '-'} | {local} | {report.mean[k]:.4g} | "
            f"{report.variance[k]:.4g} | {report.cv[k]:.4g} |\n"
        )
    lines.append("\n")
    return lines


def export_run_summary(
    metrics: RunMetrics,
    config: TrainConfig,
    output_path: str,
    *,
    split: Optional[int] = None,
    drift: Optional[Mapping[str, float]] = None,
) -> None:
    """Human-readable summary of one training run."""
    lines: List[str] = []
    title = f"# Run summary (mode={metrics.mode}"
    if split is not None:
        title += f", split={split}"
    lines.append(title + ")\n\n")

    settings = [
        ("mode", metrics.mode),
        ("lambda", f"{config.lam:g}"),
        ("t_update", f"{config.t_update} ({config.update_unit})"),
        ("learning_rate", f"{config.learning_rate:g}"),
        ("optimizer", config.optimizer),
        ("epochs", str(config.epochs)),
        ("batch_size", str(config.batch_size)),
        ("estimator", config.estimator_mode),
        ("regularizer_gradient", config.regularizer_gradient_mode),
        ("seed", str(config.seed)),
    ]
    width = max(len(k) for k, _ in settings)
    for key, value in settings:
        lines.append(f"- {key.ljust(width)}  {value}\n")
    lines.append("\n")

    if metrics.final_heldout:
        lines.append("## Held-out domain\n\n")
        for key, value in sorted(metrics.final_heldout.items()):
            lines.append(f"- {key}: {value:.6g}\n")
        lines.append("\n")

    lines.append("## Epochs\n\n")
    lines.append("| epoch | train loss | sup loss | reg | source loss | held-out loss | seconds |\n")
    lines.append("|---|---|---|---|---|---|---|\n")
    for record in metrics.records:
        heldout = record.heldout_metrics.get("loss")
        lines.append(
            f"| {record.epoch} | {record.train_loss:.6g} | {record.train_sup_loss:.6g} | "
            f"{record.reg_value:.6g} | {record.source_loss:.6g} | "
            f"{'-' if heldout is None else f'{heldout:.6g}'} | {record.seconds:.3f} |\n"
        )
    lines.append("\n")

    lines.append(
        f"Coefficient refreshes at epochs: {', '.join(str(e) for e in metrics.refresh_epochs) or 'none'}; "
        f"{metrics.iterations_per_second():.1f} it/s\n\n"
    )
    if drift:
        lines.append("## Coefficient drift\n\n")
        for key, value in drift.items():
            lines.append(f"- {key}: {value:.4g}\n")
        lines.append("\n")
    if metrics.issues:
        lines.append("## Issues\n\n")
        for issue in metrics.issues:
            lines.append(f"- {issue.code}: {issue.message}\n")
    write_lines(output_path, lines)


def export_ablation_markdown(
    rows: Sequence[Mapping[str, Any]], ordering: Mapping[str, Any], output_path: str
) -> None:
    """Ablation table sorted by held-out loss, plus the ordering outcome."""
    lines = ["# Ablation summary\n\n"]
    lines.append("| run | mode | lambda | t_update | seed | split | held-out loss | it/s |\n")
    lines.append("|---|---|---|---|---|---|---|---|\n")
    ranked = sorted(rows, key=lambda r: (float(r["heldout_metric"]), str(r["run_id"]), r["seed"]))
    for r in ranked:
        lines.append(
            f"| {r['run_id']} | {r['mode']} | {float(r['lambda']):g} | {r['t_update']} | "
            f"{r['seed']} | {r['split']} | {float(r['heldout_metric']):.6g} | "
            f"{float(r.get('iterations_per_second', 0.0)):.1f} |\n"
        )
    lines.append("\n## Ordering\n\n")
    for key in ("full", "uniform", "static", "erm"):
        lines.append(f"- mean held-out loss, {key}: {float(ordering[key]):.6g}\n")
    lines.append(f"- full <= uniform <= erm: {ordering['full_le_uniform_le_erm']}\n")
    lines.append(f"- full < erm: {ordering['full_lt_erm']}\n")
    lines.append(
        f"- best lambda: {ordering['best_lambda']} (interior: {ordering['interior_peak']})\n"
    )
    if ordering.get("selected_lambdas"):
        chosen = ", ".join(f"{lam:g}" for lam in ordering["selected_lambdas"])
        lines.append(f"- lambda of the full method: {chosen}\n")
    write_lines(output_path, lines)


def _sorted_by_score_then_name(items: Iterable, *, score_fn, name_fn) -> List:
    return sorted(
        list(items),
        key=lambda item: (
            -float(score_fn(item) or 0.0),
            (name_fn(item) or "").lower(),
        ),
    )


def summary_table_data(rows: Sequence[Mapping[str, Any]]) -> Dict[str, List[str]]:
    """Column-wise string cells for console rendering."""
    columns = ("run_id", "mode", "lambda", "t_update", "seed", "split", "heldout_metric")
    table: Dict[str, List[str]] = {c: [] for c in columns}
    for r in rows:
        for c in columns:
            value = r[c]
            table[c].append(f"{value:.6g}" if isinstance(value, float) else str(value))
    return table
