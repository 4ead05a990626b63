"""Layer → segment hierarchy for attributing sensitivities to model parts.

Segments named ``layerN.weight`` / ``layerN.bias`` are grouped under a ``layerN``
node; every node accumulates statistics of the parameters below it.
"""

from __future__ import annotations

from typing import Dict, Optional

import numpy as np

from ._models import Segment, SegmentNode, SensitivityReport


class ParameterHierarchy:
    """Builder for the segment tree of one sensitivity report."""

    def __init__(self) -> None:
        self.root: Optional[SegmentNode] = None

    @staticmethod
    def from_report(report: SensitivityReport) -> SegmentNode:
        """Build the hierarchy for every segment of ``report``.

        Returns:
            Root node (name ``model``, path ``""``). Reports without a segment
            registry attach every parameter directly to the root.
        """
        builder = ParameterHierarchy()
        for segment in report.segments:
            builder.add_segment(segment)
        root = builder.get_root()
        if not report.segments:
            root.parameter_indices.extend(range(report.n_params))
        return root

    def add_segment(self, segment: Segment) -> None:
        root = self.get_root()
        parts = segment.name.split(".")
        current = root
        accumulated = ""
        for part in parts:
            accumulated = f"{accumulated}.{part}" if accumulated else part
            if part not in current.children:
                current.children[part] = SegmentNode(name=part, path=accumulated)
            current = current.children[part]
        current.parameter_indices.extend(range(segment.offset, segment.stop))

    def get_root(self) -> SegmentNode:
        if self.root is None:
            self.root = SegmentNode(name="model", path="")
        return self.root


def accumulated_stats(node: SegmentNode, report: SensitivityReport) -> Dict[str, float]:
    """Count, mean/max c_k and mean s̄_k of every parameter under ``node`` (cached)."""
    if node._stats is None:
        indices = np.asarray(node.all_indices(), dtype=np.int64)
        if indices.size == 0:
            node._stats = {"count": 0, "mean_cv": 0.0, "max_cv": 0.0, "mean_sensitivity": 0.0}
        else:
            node._stats = {
                "count": int(indices.size),
                "mean_cv": float(np.mean(report.cv[indices])),
                "max_cv": float(np.max(report.cv[indices])),
                "mean_sensitivity": float(np.mean(report.mean[indices])),
            }
    return node._stats


def flatten_parameter_hierarchy(root: SegmentNode) -> Dict[str, SegmentNode]:
    """Map every node path to its node (root under ``""``)."""
    result: Dict[str, SegmentNode] = {}

    def traverse(node: SegmentNode) -> None:
        result[node.path] = node
        for child in node.children.values():
            traverse(child)

    traverse(root)
    return result


def get_depth(node: SegmentNode) -> int:
    """Maximum depth below ``node`` (a leaf has depth 0)."""
    if not node.children:
        return 0
    return 1 + max(get_depth(child) for child in node.children.values())
