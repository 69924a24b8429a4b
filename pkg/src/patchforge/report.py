"""Histograms, summary statistics and Pearson correlations over metric columns."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from xml.sax.saxutils import escape

import numpy as np

from patchforge.errors import ConfigError, DimensionError, EmptyDataError, UndefinedCorrelationError
from patchforge.manifest import Manifest, metric_column

SCALES = ("linear", "log10")
TRANSFORMS = (None, "sqrt")


@dataclass
class Histogram:
    """Bins are right-closed ``(lo, hi]``; the first bin also holds its left edge.

    For ``scale == "log10"`` the edges are in log10 units and values <= 0 are
    counted in ``underflow``; ``zeros`` tells how many of those were exactly 0.
    """

    edges: list[float]
    counts: list[int]
    scale: str = "linear"
    transform: str | None = None
    underflow: int = 0
    overflow: int = 0
    zeros: int = 0

    @property
    def total(self) -> int:
        return sum(self.counts) + self.underflow + self.overflow


def histogram(values, bins: int = 100, scale: str = "linear", range=None, transform=None) -> Histogram:
    if bins < 1:
        raise ConfigError(f"bins must be >= 1, got {bins}")
    if scale not in SCALES:
        raise ConfigError(f"scale must be one of {SCALES}, got {scale!r}")
    if transform not in TRANSFORMS:
        raise ConfigError(f"transform must be one of {TRANSFORMS}, got {transform!r}")
    v = np.asarray(list(values), dtype=np.float64)
    if v.size == 0:
        raise EmptyDataError("histogram of empty data")
    if not np.all(np.isfinite(v)):
        raise ValueError("histogram values must be finite")

    if transform == "sqrt":
        if np.any(v < 0):
            raise ValueError("sqrt transform needs non-negative values")
        v = np.sqrt(v)
    underflow = zeros = 0
    if scale == "log10":
        positive = v > 0
        zeros = int(np.sum(v == 0))
        underflow = int(np.sum(~positive))
        v = np.log10(v[positive])

    if range is not None:
        lo, hi = (float(r) for r in range)
        if scale == "log10":
            if lo <= 0 or hi <= 0:
                raise ConfigError("log10 histogram range must be positive")
            lo, hi = math.log10(lo), math.log10(hi)
        if not lo < hi:
            raise ConfigError(f"histogram range must satisfy lo < hi, got {range}")
    elif v.size:
        lo, hi = float(v.min()), float(v.max())
        if lo == hi:
            lo, hi = lo - 0.5, hi + 0.5
    else:
        lo, hi = 0.0, 1.0

    edges = np.linspace(lo, hi, bins + 1)
    below = v < edges[0]
    above = v > edges[-1]
    inside = v[~below & ~above]
    idx = np.searchsorted(edges, inside, side="left") - 1
    np.clip(idx, 0, bins - 1, out=idx)
    counts = np.bincount(idx, minlength=bins)
    return Histogram(
        edges=[float(e) for e in edges],
        counts=[int(c) for c in counts],
        scale=scale,
        transform=transform,
        underflow=underflow + int(below.sum()),
        overflow=int(above.sum()),
        zeros=zeros,
    )


def pearson(a, b) -> float:
    x = np.asarray(list(a), dtype=np.float64)
    y = np.asarray(list(b), dtype=np.float64)
    if x.shape != y.shape:
        raise DimensionError(f"length mismatch: {x.size} vs {y.size}")
    if x.size < 2:
        raise DimensionError("pearson needs at least 2 samples")
    dx = x - x.mean()
    dy = y - y.mean()
    sxx = float(np.dot(dx, dx))
    syy = float(np.dot(dy, dy))
    if sxx == 0 or syy == 0:
        raise UndefinedCorrelationError("correlation is undefined for a constant vector")
    r = float(np.dot(dx, dy)) / math.sqrt(sxx * syy)
    return max(-1.0, min(1.0, r))


def base_view(manifest: Manifest, selected_only: bool = False) -> Manifest:
    """Manifest restricted to un-augmented records (optionally only selected ones)."""
    recs = [r for r in manifest.records if r.transform == 0 and (r.selected or not selected_only)]
    return Manifest(records=recs, provenance=manifest.provenance)


def metric_correlation_matrix(manifest: Manifest, metrics, selected_only: bool = False) -> np.ndarray:
    metrics = list(metrics)
    cols = [metric_column(manifest, m, selected_only) for m in metrics]
    n = len(metrics)
    mat = np.eye(n)
    for i in range(n):
        for j in range(i + 1, n):
            mat[i, j] = mat[j, i] = pearson(cols[i], cols[j])
    return mat


def summary(values) -> dict:
    v = np.asarray(list(values), dtype=np.float64)
    if v.size == 0:
        raise EmptyDataError("summary of empty data")
    q1, med, q3 = np.quantile(v, [0.25, 0.5, 0.75])
    return {
        "count": int(v.size),
        "mean": float(v.mean()),
        "std": float(v.std()),
        "min": float(v.min()),
        "q1": float(q1),
        "median": float(med),
        "q3": float(q3),
        "max": float(v.max()),
    }


def metric_summary(manifest: Manifest, metric: str, selected_only: bool = False) -> dict:
    return summary(metric_column(manifest, metric, selected_only))


def write_histogram_csv(hist: Histogram, path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        cols = ["bin", "lo", "hi", "count"]
        if hist.scale == "log10":
            cols += ["value_lo", "value_hi"]
        w.writerow(cols)
        for i, count in enumerate(hist.counts):
            lo, hi = hist.edges[i], hist.edges[i + 1]
            row = [i, repr(lo), repr(hi), count]
            if hist.scale == "log10":
                row += [repr(10.0**lo), repr(10.0**hi)]
            w.writerow(row)
        w.writerow(["underflow", "", "", hist.underflow])
        w.writerow(["overflow", "", "", hist.overflow])
        if hist.scale == "log10":
            w.writerow(["underflow_zero", "", "", hist.zeros])


def write_matrix_csv(names, mat, path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["metric"] + list(names))
        for name, row in zip(names, mat):
            w.writerow([name] + [repr(float(v)) for v in row])


def write_summary_csv(stats: dict, path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["statistic", "value"])
        for k, v in stats.items():
            w.writerow([k, repr(v)])


def histogram_svg(hist: Histogram, title: str = "", width: int = 640, height: int = 320) -> str:
    """A minimal standalone SVG bar chart of the histogram counts."""
    pad = 40
    plot_w, plot_h = width - 2 * pad, height - 2 * pad
    peak = max(hist.counts) or 1
    bar_w = plot_w / len(hist.counts)
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
    ]
    for i, c in enumerate(hist.counts):
        h = plot_h * c / peak
        parts.append(
            f'<rect x="{pad + i * bar_w:.3f}" y="{pad + plot_h - h:.3f}" width="{max(bar_w - 0.5, 0.5):.3f}" '
            f'height="{h:.3f}" fill="#4a78b5"/>'
        )
    axis = "log10(value)" if hist.scale == "log10" else "value"
    if hist.transform:
        axis = axis.replace("value", f"{hist.transform}(value)")
    parts.append(f'<line x1="{pad}" y1="{pad + plot_h}" x2="{pad + plot_w}" y2="{pad + plot_h}" stroke="black"/>')
    parts.append(f'<text x="{pad}" y="{height - 10}" font-size="12">{hist.edges[0]:.4g}</text>')
    parts.append(f'<text x="{pad + plot_w}" y="{height - 10}" font-size="12" text-anchor="end">{hist.edges[-1]:.4g}</text>')
    parts.append(f'<text x="{width / 2}" y="{height - 10}" font-size="12" text-anchor="middle">{axis}</text>')
    parts.append(f'<text x="{pad}" y="{pad - 12}" font-size="14">{escape(title)} (max count {peak})</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"
