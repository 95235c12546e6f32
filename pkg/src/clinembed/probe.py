"""Artificial-input probes of a trained tokenizer.

Numerical features are probed at z-scores -3, 0 and +3, which gives the vectors
``-3W + b``, ``b`` and ``3W + b``.  Categorical features are probed at every code.
"""

from __future__ import annotations

import csv
import itertools
import json
import os
from dataclasses import dataclass
from xml.sax.saxutils import escape

import numpy as np

from .errors import IoError, SchemaError
from .tokenizer import TokenizerParams

LEVELS = {"low": -3.0, "mid": 0.0, "high": 3.0}

# Pairs the default generator ties together, with the expected sign of association.
DEFAULT_PLANTED = {
    "positive": [["Temp", "RR"], ["RR", "HR"], ["SBP", "DBP"]],
    "negative": [["OS", "FIO"]],
}


@dataclass(frozen=True)
class ProbePoint:
    feature: str
    level: str
    vector: np.ndarray


def probe_numerical(params: TokenizerParams) -> list[ProbePoint]:
    points = []
    for name in params.schema.numerical_names():
        W, b = params.num_row(name)
        for level, z in LEVELS.items():
            vec = b.copy() if z == 0.0 else z * W + b
            points.append(ProbePoint(name, level, vec))
    return points


def probe_categorical(params: TokenizerParams) -> list[ProbePoint]:
    points = []
    for name in params.schema.categorical_names():
        W, b = params.cat_rows(name)
        for code in range(W.shape[0]):
            points.append(ProbePoint(name, str(code), W[code] + b))
    return points


def stack(points) -> np.ndarray:
    return np.stack([p.vector for p in points])


def _by_level(points):
    table = {}
    for p in points:
        table.setdefault(p.feature, {})[p.level] = p.vector
    return table


def direction_cosines(points) -> tuple[list[str], np.ndarray]:
    """Cosine similarity between the (high - low) directions of every numerical feature pair."""
    table = _by_level(points)
    names = [n for n, lv in table.items() if "high" in lv and "low" in lv]
    if len(names) < 2:
        raise SchemaError("direction cosines need numerical probe points for two features")
    D = np.stack([table[n]["high"] - table[n]["low"] for n in names])
    norms = np.linalg.norm(D, axis=1)
    norms[norms == 0] = 1.0
    U = D / norms[:, None]
    return names, U @ U.T


def _mean_pairwise(X):
    if len(X) < 2:
        return 0.0
    diff = X[:, None, :] - X[None, :, :]
    dist = np.sqrt(np.sum(diff * diff, axis=-1))
    iu = np.triu_indices(len(X), k=1)
    return float(dist[iu].mean())


def correlation_report(points, planted=None) -> dict:
    """Pair cosines ranked from most to least aligned, planted-pair ranks and the mid-level cluster check.

    ``planted`` maps "positive" / "negative" to lists of feature-name pairs.
    """
    planted = DEFAULT_PLANTED if planted is None else planted
    names, C = direction_cosines(points)
    pairs = [(C[a, b], names[a], names[b]) for a, b in itertools.combinations(range(len(names)), 2)]
    # ties broken by name order so the ranking is a pure function of the input
    pairs.sort(key=lambda t: (-t[0], t[1], t[2]))
    rank = {frozenset((a, b)): i for i, (_, a, b) in enumerate(pairs)}
    n_pairs = len(pairs)
    top_quartile = n_pairs // 4

    def lookup(a, b):
        key = frozenset((a, b))
        if key not in rank:
            raise SchemaError(f"pair ({a}, {b}) is not a pair of probed numerical features")
        return rank[key], float(C[names.index(a), names.index(b)])

    positive = []
    for a, b in planted.get("positive", []):
        r, c = lookup(a, b)
        positive.append({"pair": [a, b], "cosine": c, "rank": r, "top_quartile": r < top_quartile})
    negative = []
    for a, b in planted.get("negative", []):
        r, c = lookup(a, b)
        negative.append({"pair": [a, b], "cosine": c, "rank": r, "negative": c < 0})

    num = [p for p in points if p.level in LEVELS]
    mids = np.stack([p.vector for p in num if p.level == "mid"])
    mid_dist = _mean_pairwise(mids)
    all_dist = _mean_pairwise(stack(num))
    return {
        "pairs": [{"pair": [a, b], "cosine": float(c), "rank": i} for i, (c, a, b) in enumerate(pairs)],
        "n_pairs": n_pairs,
        "top_quartile_size": top_quartile,
        "planted_positive": positive,
        "planted_negative": negative,
        "recovered": all(p["top_quartile"] for p in positive) and all(p["negative"] for p in negative),
        "mid_mean_distance": mid_dist,
        "all_mean_distance": all_dist,
        "mid_clustered": mid_dist < all_dist,
    }


def write_report(report: dict, path):
    try:
        with open(path, "w") as fh:
            json.dump(report, fh, indent=2, sort_keys=True)
            fh.write("\n")
    except OSError as exc:
        raise IoError(f"cannot write report {path}: {exc}") from None


# --- scatter output ---------------------------------------------------------------

PALETTE = ["#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2",
           "#7f7f7f", "#bcbd22", "#17becf", "#393b79", "#637939", "#8c6d31"]


def _marker(level, x, y, r, color):
    if level == "low":
        pts = [(x - r, y - r), (x + r, y - r), (x, y + r)]
    elif level == "high":
        pts = [(x - r, y + r), (x + r, y + r), (x, y - r)]
    else:
        return f'<circle cx="{x:.2f}" cy="{y:.2f}" r="{r:.2f}" fill="{color}"/>'
    coords = " ".join(f"{px:.2f},{py:.2f}" for px, py in pts)
    return f'<polygon points="{coords}" fill="{color}"/>'


def render_svg(coords, points, size=480, margin=40) -> str:
    """Scatter of 2-D coordinates; colour per feature, triangle down/circle/triangle up for low/mid/high.

    Categorical points are drawn as circles annotated with their code.
    """
    coords = np.asarray(coords, dtype=np.float64)
    lo, hi = coords.min(axis=0), coords.max(axis=0)
    span = np.where(hi - lo > 0, hi - lo, 1.0)
    inner = size - 2 * margin
    # SVG y grows downward
    px = margin + (coords[:, 0] - lo[0]) / span[0] * inner
    py = margin + (hi[1] - coords[:, 1]) / span[1] * inner
    features = list(dict.fromkeys(p.feature for p in points))
    colors = {f: PALETTE[i % len(PALETTE)] for i, f in enumerate(features)}
    width = size + 120
    out = [
        '<?xml version="1.0" encoding="UTF-8"?>',
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{size}" viewBox="0 0 {width} {size}">',
        f'<rect x="0" y="0" width="{width}" height="{size}" fill="white"/>',
    ]
    for p, x, y in zip(points, px, py):
        out.append(_marker(p.level, x, y, 5.0, colors[p.feature]))
        if p.level not in LEVELS:
            out.append(f'<text x="{x + 6:.2f}" y="{y - 6:.2f}" font-size="9" font-family="sans-serif">'
                       f"{escape(p.level)}</text>")
    for i, f in enumerate(features):
        y = margin + 16 * i
        out.append(f'<rect x="{size + 10}" y="{y - 8}" width="10" height="10" fill="{colors[f]}"/>')
        out.append(f'<text x="{size + 26}" y="{y + 1}" font-size="11" font-family="sans-serif">{escape(f)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def emit_scatter(coords, points, csv_path, svg_path):
    """Write (name, level, x, y) rows and the matching SVG scatter."""
    coords = np.asarray(coords, dtype=np.float64)
    if coords.shape != (len(points), 2):
        raise SchemaError(f"expected {len(points)} x 2 coordinates, got {coords.shape}")
    if not np.all(np.isfinite(coords)):
        raise SchemaError("scatter coordinates must be finite")
    try:
        with open(csv_path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["name", "level", "x", "y"])
            for p, (x, y) in zip(points, coords):
                w.writerow([p.feature, p.level, repr(float(x)), repr(float(y))])
        with open(svg_path, "w") as fh:
            fh.write(render_svg(coords, points))
    except OSError as exc:
        raise IoError(f"cannot write scatter output: {exc}") from None
    return os.fspath(csv_path), os.fspath(svg_path)
