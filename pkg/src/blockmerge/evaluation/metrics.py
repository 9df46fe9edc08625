"""Preservation metrics and the search objective."""

from __future__ import annotations

import math
from typing import Sequence

from ..errors import LengthMismatch, NonFiniteLoss, NonPositiveSource

LOSS_EPS = 1e-9
AP_CAP = 1e3


def approximated_preservation(loss_source: float, loss_merged: float) -> float:
    """Source loss over merged loss, clamped to ``[0, AP_CAP]``."""
    if not (math.isfinite(loss_source) and math.isfinite(loss_merged)):
        raise NonFiniteLoss("losses must be finite")
    ap = loss_source / max(loss_merged, LOSS_EPS)
    return min(max(ap, 0.0), AP_CAP)


def objective_f(ap_a: float, ap_b: float) -> float:
    """Harmonic mean of the two preservation values (0 when both are 0)."""
    if ap_a + ap_b == 0:
        return 0.0
    return 2.0 * ap_a * ap_b / (ap_a + ap_b)


def preservation_rate(merged_metrics: Sequence[float], source_metrics: Sequence[float]) -> float:
    """Mean ratio of merged to source scores over one task's metrics (higher is better)."""
    if len(merged_metrics) != len(source_metrics) or not merged_metrics:
        raise LengthMismatch("need equally many merged and source metrics, at least one")
    if any(s <= 0 for s in source_metrics):
        raise NonPositiveSource("source metrics must be positive")
    return sum(m / s for m, s in zip(merged_metrics, source_metrics)) / len(merged_metrics)


def preservation_discrepancy(pr_a: float, pr_b: float) -> float:
    return abs(pr_a - pr_b)
