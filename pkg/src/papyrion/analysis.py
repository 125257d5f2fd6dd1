"""Correlation between binarization quality and writer-task scores.

The central question: when the same corpus is binarized several ways, do the
classic pixel metrics (FM, pFM, PSNR, DRD) move together with the downstream
retrieval and identification numbers? Each binarization method contributes
one observation per metric pair, and the Pearson coefficient over those
observations is the summary.

The significance test is the exact two-sided t test for zero true
correlation under bivariate normality, evaluated through the regularized
incomplete beta function rather than a t-table.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import betainc

from papyrion.errors import PapyrionError, ParameterError

__all__ = [
    "pearson",
    "spearman",
    "CorrelationCell",
    "correlation_report",
    "scatter_csv",
]

BIN_METRICS = ("fm", "pfm", "psnr", "drd")
WRITER_METRICS = ("map", "top1", "top1_mean", "top5_mean")


def _validated(x, y) -> tuple[np.ndarray, np.ndarray]:
    xv = np.asarray(x, dtype=np.float64).ravel()
    yv = np.asarray(y, dtype=np.float64).ravel()
    if xv.shape != yv.shape:
        raise ParameterError("x and y must have the same length")
    if xv.size < 3:
        raise ParameterError(f"need at least 3 observations, got {xv.size}")
    if not (np.isfinite(xv).all() and np.isfinite(yv).all()):
        raise ParameterError("observations must be finite")
    if np.all(xv == xv[0]) or np.all(yv == yv[0]):
        raise PapyrionError("zero variance: correlation is undefined")
    return xv, yv


def pearson(x, y) -> tuple[float, float]:
    """Pearson r and its two-sided p-value.

    r is clipped to [-1, 1] to absorb rounding on perfectly collinear data,
    and those endpoints report p = 0. Otherwise, with t^2 = r^2 (n-2) /
    (1-r^2), the p-value is I_{(n-2)/((n-2)+t^2)}((n-2)/2, 1/2), the exact
    tail mass of the t distribution with n-2 degrees of freedom.
    """
    xv, yv = _validated(x, y)
    n = xv.size
    xd = xv - xv.mean()
    yd = yv - yv.mean()
    r = float(np.dot(xd, yd) / math.sqrt(np.dot(xd, xd) * np.dot(yd, yd)))
    r = max(-1.0, min(1.0, r))
    if abs(r) == 1.0:
        return r, 0.0
    df = n - 2
    t2 = r * r * df / (1.0 - r * r)
    p = float(betainc(df / 2.0, 0.5, df / (df + t2)))
    return r, p


def _average_ranks(v: np.ndarray) -> np.ndarray:
    order = np.argsort(v, kind="stable")
    ranks = np.empty(v.size, dtype=np.float64)
    i = 0
    while i < v.size:
        j = i
        while j + 1 < v.size and v[order[j + 1]] == v[order[i]]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def spearman(x, y) -> tuple[float, float]:
    """Spearman rho: Pearson over average ranks, same p-value machinery."""
    xv, yv = _validated(x, y)
    return pearson(_average_ranks(xv), _average_ranks(yv))


@dataclass(frozen=True)
class CorrelationCell:
    bin_metric: str
    writer_metric: str
    subset: str
    r: float
    p: float
    n: int


def correlation_report(
    bin_reports: dict[str, dict],
    writer_reports: dict[str, dict],
    rank: bool = False,
) -> dict:
    """Correlate per-method binarization metrics with writer-task metrics.

    ``bin_reports`` maps method id to {subset: {metric: value}} with subsets
    "A" and "B"; ``writer_reports`` maps method id to {metric: value}. Only
    methods present on both sides are joined, and at least 3 shared methods
    are required. The synthetic subset "A+B" is the mean of the A and B
    values. PSNR observations of infinity are excluded pairwise, with a
    warning naming the methods dropped; a cell left with fewer than 3
    points, or whose series is constant, is skipped with a warning.

    Returns a dict with "cells" (one entry per bin-metric x writer-metric x
    subset), "scatter" rows for plotting, "methods" joined, and "warnings".
    """
    shared = sorted(set(bin_reports) & set(writer_reports))
    if len(shared) < 3:
        missing_b = sorted(set(bin_reports) - set(writer_reports))
        missing_w = sorted(set(writer_reports) - set(bin_reports))
        raise PapyrionError(
            "need at least 3 methods present in both report sets, "
            f"got {len(shared)} "
            f"(binarization-only: {missing_b or 'none'}, "
            f"writer-only: {missing_w or 'none'})"
        )
    warnings: list[str] = []
    corr = spearman if rank else pearson

    def bin_value(method: str, metric: str, subset: str) -> float | None:
        per = bin_reports[method]
        if subset == "A+B":
            if "A" not in per or "B" not in per:
                return None
            return 0.5 * (per["A"][metric] + per["B"][metric])
        if subset not in per:
            return None
        return per[subset][metric]

    cells: list[CorrelationCell] = []
    scatter: list[dict] = []
    for bm in BIN_METRICS:
        for wm in WRITER_METRICS:
            if not all(wm in writer_reports[m] for m in shared):
                continue
            for subset in ("A", "B", "A+B"):
                xs, ys, kept = [], [], []
                dropped, missing = [], []
                for m in shared:
                    bv = bin_value(m, bm, subset)
                    if bv is None:
                        missing.append(m)
                        continue
                    if bm == "psnr" and math.isinf(bv):
                        dropped.append(m)
                        continue
                    xs.append(bv)
                    ys.append(writer_reports[m][wm])
                    kept.append(m)
                if missing:
                    warnings.append(
                        f"{bm}/{subset}: no such subset in methods {missing}"
                    )
                if dropped:
                    warnings.append(
                        f"psnr/{subset}: excluded infinite values from {dropped}"
                    )
                if len(xs) < 3:
                    warnings.append(
                        f"{bm}/{wm}/{subset}: only {len(xs)} finite points, skipped"
                    )
                    continue
                if min(xs) == max(xs) or min(ys) == max(ys):
                    # one constant series (every method scoring the same)
                    # leaves r undefined; drop the cell, keep the report
                    warnings.append(
                        f"{bm}/{wm}/{subset}: constant series, skipped"
                    )
                    continue
                r, p = corr(xs, ys)
                cells.append(CorrelationCell(bm, wm, subset, r, p, len(xs)))
                for m, bv, wv in zip(kept, xs, ys):
                    scatter.append(
                        {
                            "method": m,
                            "subset": subset,
                            "bin_metric": bm,
                            "bin_value": bv,
                            "writer_metric": wm,
                            "writer_value": wv,
                        }
                    )
    return {
        "methods": shared,
        "rank": rank,
        "cells": [vars(c) for c in cells],
        "scatter": scatter,
        "warnings": list(dict.fromkeys(warnings)),
    }


def scatter_csv(report: dict) -> str:
    """Render the scatter rows of a correlation report as CSV text."""
    lines = ["method,subset,bin_metric,bin_value,writer_metric,writer_value"]
    for row in report["scatter"]:
        lines.append(
            f"{row['method']},{row['subset']},{row['bin_metric']},"
            f"{row['bin_value']!r},{row['writer_metric']},{row['writer_value']!r}"
        )
    return "\n".join(lines) + "\n"
