"""Ranking metrics for imbalanced binary labels and run aggregation."""

from __future__ import annotations

import re

import numpy as np

from .errors import MetricError


def _check(scores, labels):
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    y = np.asarray(labels).reshape(-1)
    if s.shape != y.shape:
        raise MetricError(f"{s.size} scores but {y.size} labels")
    if s.size < 2:
        raise MetricError("need at least two scored labels")
    if not np.all(np.isfinite(s)):
        raise MetricError("scores must be finite")
    if not np.all((y == 0) | (y == 1)):
        raise MetricError("labels must be binary")
    y = y.astype(bool)
    if y.all() or not y.any():
        raise MetricError("need at least one positive and one negative label")
    return s, y


def auroc(scores, labels) -> float:
    """Mann-Whitney AUC: fraction of (positive, negative) pairs ranked correctly, ties count half."""
    s, y = _check(scores, labels)
    # average ranks handle ties exactly
    order = np.argsort(s, kind="mergesort")
    ranks = np.empty(s.size)
    sorted_s = s[order]
    start = 0
    for end in range(1, s.size + 1):
        if end == s.size or sorted_s[end] != sorted_s[start]:
            ranks[order[start:end]] = 0.5 * (start + end - 1) + 1.0
            start = end
    n_pos = int(y.sum())
    n_neg = s.size - n_pos
    u = ranks[y].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def auprc(scores, labels) -> float:
    """Average precision with tied scores entering the ranking as one block."""
    s, y = _check(scores, labels)
    order = np.argsort(-s, kind="mergesort")
    s, y = s[order], y[order]
    # last index of each block of equal scores
    ends = np.flatnonzero(np.r_[s[1:] != s[:-1], True])
    tp = np.cumsum(y)[ends]
    seen = ends + 1
    new_pos = np.diff(np.r_[0, tp])
    return float(np.sum(new_pos * (tp / seen)) / tp[-1])


def aggregate_runs(values) -> tuple[float, float]:
    """(mean, sample std) over per-seed values."""
    v = np.asarray(values, dtype=np.float64)
    if v.size < 2:
        raise MetricError("aggregation needs at least two runs")
    return float(v.mean()), float(v.std(ddof=1))


def format_mean_std(mean: float, std: float, percent=True, digits=1) -> str:
    """``36.4±0.2`` style cell; ``percent`` scales fractions by 100."""
    k = 100.0 if percent else 1.0
    return f"{mean * k:.{digits}f}±{std * k:.{digits}f}"


_CELL = re.compile(r"^\s*(-?\d+(?:\.\d+)?)\s*±\s*(\d+(?:\.\d+)?)\s*$")


def parse_mean_std(text: str) -> tuple[float, float]:
    m = _CELL.match(text)
    if not m:
        raise MetricError(f"not a mean±std cell: {text!r}")
    return float(m.group(1)), float(m.group(2))
