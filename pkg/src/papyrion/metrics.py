"""Binarization quality metrics in the style of the DIBCO contests.

All four scores compare a predicted ink mask against a ground-truth ink mask
of the same size. They are deliberately asymmetric where the contest metrics
are: pseudo F-measure skeletonizes the ground truth only, and DRD weights
errors by the ground-truth neighborhood.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from papyrion.errors import PapyrionError
from papyrion.imgcore import BinaryImage, cumulative_table, skeletonize

__all__ = [
    "ConfusionCounts",
    "BinMetricsReport",
    "confusion",
    "f_measure",
    "pseudo_f_measure",
    "psnr",
    "drd",
    "evaluate_pair",
]


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    fn: int
    tn: int

    def __post_init__(self) -> None:
        for name in ("tp", "fp", "fn", "tn"):
            if getattr(self, name) < 0:
                raise PapyrionError(f"negative confusion count {name}")


def _check_dims(pred: BinaryImage, gt: BinaryImage) -> None:
    if pred.mask.shape != gt.mask.shape:
        raise PapyrionError(
            f"size mismatch: prediction {pred.mask.shape} vs ground truth {gt.mask.shape}"
        )


def confusion(pred: BinaryImage, gt: BinaryImage) -> ConfusionCounts:
    """Pixel confusion counts, ink being the positive class."""
    _check_dims(pred, gt)
    p, g = pred.mask, gt.mask
    tp = int(np.count_nonzero(p & g))
    fp = int(np.count_nonzero(p & ~g))
    fn = int(np.count_nonzero(~p & g))
    tn = int(np.count_nonzero(~p & ~g))
    return ConfusionCounts(tp, fp, fn, tn)


def f_measure(c: ConfusionCounts) -> float:
    """F1 on the ink class, scaled to [0, 100].

    Degenerate inputs follow the contest convention: with no true positives
    the score is 0 unless prediction and truth are both empty, which scores a
    perfect 100.
    """
    if c.tp == 0:
        return 100.0 if c.fp == 0 and c.fn == 0 else 0.0
    precision = c.tp / (c.tp + c.fp)
    recall = c.tp / (c.tp + c.fn)
    return 200.0 * precision * recall / (precision + recall)


def pseudo_f_measure(
    pred: BinaryImage, gt: BinaryImage, gt_skeleton: BinaryImage | None = None
) -> float:
    """F-measure with recall evaluated on the skeleton of the ground truth.

    Precision is the ordinary ink precision; pseudo-recall is the fraction of
    ground-truth skeleton pixels the prediction covers. Pass a precomputed
    ``gt_skeleton`` to amortize thinning across many predictions.
    """
    _check_dims(pred, gt)
    p, g = pred.mask, gt.mask
    n_pred = int(np.count_nonzero(p))
    n_gt = int(np.count_nonzero(g))
    if n_gt == 0:
        return 100.0 if n_pred == 0 else 0.0
    if n_pred == 0:
        return 0.0

    if gt_skeleton is None:
        gt_skeleton = skeletonize(gt)
    support = gt_skeleton.mask
    if not support.any():
        # Thinning can erase tiny blobs outright; fall back to the full ink.
        support = g

    tp = int(np.count_nonzero(p & g))
    if tp == 0:
        return 0.0
    precision = tp / n_pred
    recall_ps = int(np.count_nonzero(p & support)) / int(np.count_nonzero(support))
    if precision + recall_ps == 0.0:
        return 0.0
    return 200.0 * precision * recall_ps / (precision + recall_ps)


def psnr(pred: BinaryImage, gt: BinaryImage) -> float:
    """Peak signal-to-noise ratio over the {0, 1} images.

    The squared error of a flipped pixel is 1, so MSE is the flip fraction
    and PSNR = 10 log10(n_pixels / n_flipped). Identical masks give +inf.
    """
    _check_dims(pred, gt)
    n_diff = int(np.count_nonzero(pred.mask != gt.mask))
    if n_diff == 0:
        return math.inf
    return 10.0 * math.log10(pred.mask.size / n_diff)


def _drd_weights() -> np.ndarray:
    ij = np.arange(-2, 3, dtype=np.float64)
    di, dj = np.meshgrid(ij, ij, indexing="ij")
    with np.errstate(divide="ignore"):
        w = 1.0 / np.sqrt(di * di + dj * dj)
    w[2, 2] = 0.0
    return w / w.sum()


_DRD_W = _drd_weights()


def _nubn(gt: BinaryImage) -> int:
    """Count 8x8 blocks (tiled from the top-left corner, partial blocks at
    the right/bottom edges included) that contain both ink and background."""
    g = gt.mask.astype(np.int64)
    h, w = g.shape
    tab = cumulative_table(g)
    count = 0
    for y0 in range(0, h, 8):
        y1 = min(y0 + 8, h)
        for x0 in range(0, w, 8):
            x1 = min(x0 + 8, w)
            s = int(tab[y1, x1] - tab[y0, x1] - tab[y1, x0] + tab[y0, x0])
            if 0 < s < (y1 - y0) * (x1 - x0):
                count += 1
    return count


def drd(pred: BinaryImage, gt: BinaryImage) -> float:
    """Distance reciprocal distortion.

    Each flipped pixel contributes the 5x5 reciprocal-distance-weighted
    disagreement between its predicted value and the ground-truth
    neighborhood (out-of-image neighbors count as background). The total is
    divided by NUBN, the number of non-uniform 8x8 ground-truth blocks.

    A ground truth with NUBN = 0 cannot normalize any distortion; with
    flipped pixels present this raises "degenerate ground truth".
    """
    _check_dims(pred, gt)
    p = pred.mask
    g = gt.mask
    diff = p != g
    n_flips = int(np.count_nonzero(diff))
    nubn = _nubn(gt)
    if nubn == 0:
        if n_flips > 0:
            raise PapyrionError("degenerate ground truth: no non-uniform 8x8 block")
        return 0.0
    if n_flips == 0:
        return 0.0

    h, w = g.shape
    gp = np.pad(g.astype(np.float64), 2, mode="constant", constant_values=0.0)
    pv = p.astype(np.float64)
    per_pixel = np.zeros((h, w), dtype=np.float64)
    for di in range(-2, 3):
        for dj in range(-2, 3):
            wgt = _DRD_W[di + 2, dj + 2]
            if wgt == 0.0:
                continue
            shifted = gp[2 + di : 2 + di + h, 2 + dj : 2 + dj + w]
            per_pixel += wgt * np.abs(shifted - pv)
    return float(per_pixel[diff].sum() / nubn)


@dataclass(frozen=True)
class BinMetricsReport:
    """The four scores for one prediction/ground-truth pair."""

    fm: float
    pfm: float
    psnr: float
    drd: float

    def as_dict(self) -> dict:
        return {"fm": self.fm, "pfm": self.pfm, "psnr": self.psnr, "drd": self.drd}


def evaluate_pair(
    pred: BinaryImage, gt: BinaryImage, gt_skeleton: BinaryImage | None = None
) -> BinMetricsReport:
    c = confusion(pred, gt)
    return BinMetricsReport(
        fm=f_measure(c),
        pfm=pseudo_f_measure(pred, gt, gt_skeleton=gt_skeleton),
        psnr=psnr(pred, gt),
        drd=drd(pred, gt),
    )
