"""Correlation primitives: Pearson's r and Spearman's rank correlation.

Both are computed with two passes (mean, then centered products) and
64-bit accumulation regardless of the input dtype, which avoids
catastrophic cancellation on long series of small per-epoch loss
deltas. Zero-variance inputs are a defined case, not an error: the
result is flagged degenerate and valued 0 so that downstream averaging
stays total and deterministic.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ltckit.errors import DataError

# Rounding slack allowed before clamping into [-1, 1].
_CLAMP_SLACK = 1e-12


@dataclass(frozen=True)
class CorrelationResult:
    value: float
    degenerate: bool

    def __post_init__(self) -> None:
        if self.degenerate and self.value != 0.0:
            raise DataError("degenerate correlation must carry value 0")


def _as_finite_f64(x, name: str) -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 1:
        raise DataError(f"{name} must be one-dimensional")
    if not np.all(np.isfinite(arr)):
        raise DataError(f"{name} contains a non-finite value")
    return arr


def _check_pair(x, y) -> tuple[np.ndarray, np.ndarray]:
    xa = _as_finite_f64(x, "x")
    ya = _as_finite_f64(y, "y")
    if xa.shape[0] != ya.shape[0]:
        raise DataError(f"length mismatch: {xa.shape[0]} vs {ya.shape[0]}")
    if xa.shape[0] < 2:
        raise DataError("series must have length >= 2")
    return xa, ya


def pearson(x, y) -> CorrelationResult:
    """Pearson's correlation coefficient of two equal-length series.

    Returns a degenerate (value 0) result when either series has zero
    variance; otherwise the value is clamped to [-1, 1].
    """
    xa, ya = _check_pair(x, y)
    # A constant series has zero variance even when its floating-point
    # mean is inexact, so test constancy directly as well.
    if np.all(xa == xa[0]) or np.all(ya == ya[0]):
        return CorrelationResult(0.0, True)
    xc = xa - xa.mean()
    yc = ya - ya.mean()
    sxx = float(np.dot(xc, xc))
    syy = float(np.dot(yc, yc))
    if sxx == 0.0 or syy == 0.0:
        return CorrelationResult(0.0, True)
    # Square roots taken separately: the raw product sxx * syy can
    # underflow to zero for very small (but nonzero) variances.
    r = float(np.dot(xc, yc)) / (np.sqrt(sxx) * np.sqrt(syy))
    if abs(r) > 1.0 + _CLAMP_SLACK:
        raise DataError(f"correlation {r} exceeds clamp slack")
    return CorrelationResult(min(1.0, max(-1.0, r)), False)


def rank_average_ties(x) -> np.ndarray:
    """Rank a series starting at 1; tied entries share the mean of the
    ranks they span (the standard average-rank convention)."""
    xa = _as_finite_f64(x, "x")
    n = xa.shape[0]
    order = np.argsort(xa, kind="stable")
    ranks = np.empty(n, dtype=np.float64)
    i = 0
    while i < n:
        j = i
        while j + 1 < n and xa[order[j + 1]] == xa[order[i]]:
            j += 1
        # positions i..j (0-based) hold ties; assign the mean of ranks i+1..j+1
        ranks[order[i : j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def spearman(x, y) -> CorrelationResult:
    """Spearman's rank correlation: Pearson's r of average-tied ranks."""
    xa, ya = _check_pair(x, y)
    return pearson(rank_average_ties(xa), rank_average_ties(ya))
