from __future__ import annotations

from typing import List, Literal, Optional, Sequence, Tuple

import numpy as np

from ._markdown import export_markdown
from ._models import DomainDataset, ModelSpec, ParameterVector, SegmentNode, SensitivityReport
from ._param_hierarchy import ParameterHierarchy
from ._persistence import write_sensitivity_csv
from .sensitivity import DEFAULT_EPSILON, domain_report, rank_by_dispersion


class DomainSensitivityAnalyzer:
    """Public API facade for per-domain parameter sensitivity analysis.

    Construct with a model, its parameters and two or more domains, then query or
    export the report. The lower-level functions in :mod:`sensitivity` stay available;
    prefer this facade for reporting.

    Example:
        >>> analyzer = DomainSensitivityAnalyzer(spec, params, domains)
        >>> analyzer.export_csv("runs/sensitivity.csv")
        >>> analyzer.export_markdown("runs/sensitivity.md", mode="segment")
    """

    def __init__(
        self,
        spec: ModelSpec,
        params: ParameterVector,
        domains: Sequence[DomainDataset],
        *,
        variances=None,
        mode: str = "jacobian",
        epsilon: float = DEFAULT_EPSILON,
    ) -> None:
        """Compute the sensitivity report.

        Args:
            spec: Model architecture.
            params: Parameters at which sensitivities are evaluated.
            domains: Per-domain samples (at least two domains).
            variances: Var(θ_k); defaults to ``params.variances``.
            mode: Estimator: ``jacobian``, ``loss-grad`` or ``loss-grad-batch``.
            epsilon: ε of the coefficient of variation.
        """
        self._spec = spec
        self._report = domain_report(
            spec, params, domains, variances=variances, mode=mode, epsilon=epsilon
        )
        self._hierarchy: Optional[SegmentNode] = None

    @property
    def report(self) -> SensitivityReport:
        return self._report

    @property
    def issues(self):
        """Non-fatal findings, e.g. parameters with zero sensitivity everywhere."""
        return list(self._report.issues)

    @property
    def hierarchy(self) -> SegmentNode:
        """Layer → segment tree over the report's parameters."""
        if self._hierarchy is None:
            self._hierarchy = ParameterHierarchy.from_report(self._report)
        return self._hierarchy

    def top_parameters(self, count: int = 10) -> List[Tuple[int, str, int, float]]:
        """``(flat index, segment, local index, c_k)`` of the most dispersed parameters."""
        rows = []
        for k in rank_by_dispersion(self._report)[:count]:
            segment, local = self._report.locate(int(k))
            rows.append((int(k), segment, local, float(self._report.cv[k])))
        return rows

    def segment_dispersion(self) -> dict:
        """Mean c_k per segment, in registry order."""
        return {
            seg.name: float(np.mean(self._report.cv[seg.offset : seg.stop])) if seg.length else 0.0
            for seg in self._report.segments
        }

    # -----------------
    # Exports
    # -----------------

    def export_csv(self, output_path: str) -> None:
        """Write the per-parameter, per-domain sensitivity table."""
        write_sensitivity_csv(self._report, output_path)

    def export_markdown(
        self,
        output_path: str,
        *,
        mode: Literal["segment", "parameter"] = "segment",
        top: int = 10,
    ) -> None:
        """Export a Markdown report sorted by mean c_k.

        Args:
            output_path: Path where the Markdown file will be written (required).
            mode: ``segment`` (layers → segments) or ``parameter`` (top-c_k table).
            top: Number of parameters listed.

        Raises:
            ValueError: If mode is not a supported value.
        """
        export_markdown(self._report, output_path, mode=mode, top=top)
