"""Classical document binarization: global Otsu plus five local algorithms.

Conventions shared by every method here:

* Input is 8-bit grayscale; output masks mark ink as True.
* Text is assumed dark: a pixel is ink iff its value is <= the local (or
  global) threshold. Callers that deal with light-on-dark material should
  invert the image first.
* Local statistics are computed over the intersection of the centered window
  with the image. No padding, no reflected borders.
* Window statistics come from integral images, so sums are exact integers
  and the thresholds match a naive per-pixel evaluation bit for bit.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from papyrion.errors import ParameterError, PapyrionError
from papyrion.imgcore import (
    BinaryImage,
    RasterImage,
    cumulative_table,
    integral_build,
    skeletonize,
    window_counts,
    windowed_sum,
)
from papyrion import metrics

__all__ = [
    "METHODS",
    "LOCAL_METHODS",
    "LocalThreshParams",
    "GridSpec",
    "GridResult",
    "otsu_threshold",
    "binarize_otsu",
    "binarize_local",
    "binarize_su",
    "binarize_gatos",
    "binarize_method",
    "grid_search",
]

METHODS = ("otsu", "sauvola", "nick", "trsingh", "su", "gatos")
LOCAL_METHODS = ("sauvola", "nick", "trsingh")

# Sensitivity constants as published by the original authors.
DEFAULT_K = {"sauvola": 0.2, "nick": -0.2, "trsingh": 0.35}
DEFAULT_R = 128.0
GATOS_Q = 0.6
GATOS_P1 = 0.5
GATOS_P2 = 0.8


@dataclass(frozen=True)
class LocalThreshParams:
    """Window size plus the optional per-method knobs.

    ``k`` falls back to the method's published default when None. ``r`` is
    Sauvola's dynamic range constant, ``minn`` the minimum high-contrast
    count for Su, ``glyph`` the stroke-height estimate for Gatos.
    """

    window: int
    k: float | None = None
    r: float = DEFAULT_R
    minn: int | None = None
    glyph: int | None = None

    def __post_init__(self) -> None:
        if not isinstance(self.window, (int, np.integer)) or isinstance(self.window, bool):
            raise ParameterError("window must be an integer")
        if self.window < 3 or self.window % 2 == 0:
            raise ParameterError(f"window must be odd and >= 3, got {self.window}")
        if self.k is not None and not math.isfinite(self.k):
            raise ParameterError("k must be finite")
        if not (self.r > 0):
            raise ParameterError(f"r must be positive, got {self.r}")
        if self.minn is not None and self.minn < 1:
            raise ParameterError(f"minn must be >= 1, got {self.minn}")
        if self.glyph is not None and self.glyph < 1:
            raise ParameterError(f"glyph must be >= 1, got {self.glyph}")


def _require_gray(img: RasterImage) -> np.ndarray:
    if img.channels != 1:
        raise ParameterError("binarization expects a grayscale image")
    return img.px


def otsu_threshold(hist: np.ndarray) -> int:
    """Threshold T in [0, 255] maximizing inter-class variance.

    Classes are {p < T} and {p >= T}; the objective is
    n0 * n1 * (mu0 - mu1)^2, with empty classes scoring 0. Ties resolve to
    the smallest T, so a constant image yields T = 0 (an empty ink class).
    """
    hist = np.asarray(hist, dtype=np.int64)
    if hist.shape != (256,):
        raise ParameterError("histogram must have 256 bins")
    values = np.arange(256, dtype=np.int64)
    csum = np.cumsum(hist)
    cval = np.cumsum(hist * values)
    total_n = int(csum[-1])
    total_s = int(cval[-1])
    if total_n == 0:
        raise ParameterError("histogram is empty")

    # n0[T] = #(p < T). Index shift: n0[0] = 0.
    n0 = np.concatenate(([0], csum[:255])).astype(np.float64)
    s0 = np.concatenate(([0], cval[:255])).astype(np.float64)
    n1 = total_n - n0
    s1 = total_s - s0
    with np.errstate(divide="ignore", invalid="ignore"):
        mu0 = np.where(n0 > 0, s0 / n0, 0.0)
        mu1 = np.where(n1 > 0, s1 / n1, 0.0)
    sigma = np.where((n0 > 0) & (n1 > 0), n0 * n1 * (mu0 - mu1) ** 2, 0.0)
    return int(np.argmax(sigma))


def binarize_otsu(gray: RasterImage) -> BinaryImage:
    """Global Otsu threshold; pixels strictly below the threshold are ink."""
    px = _require_gray(gray)
    hist = np.bincount(px.ravel(), minlength=256)
    t = otsu_threshold(hist)
    return BinaryImage(px < t)


def _window_mean_and_sums(gray: RasterImage, window: int):
    ii = integral_build(gray)
    cnt, s1, s2 = ii.window_stats(window)
    cnt = cnt.astype(np.float64)
    s1 = s1.astype(np.float64)
    s2 = s2.astype(np.float64)
    return cnt, s1, s2


def binarize_local(gray: RasterImage, method: str, params: LocalThreshParams) -> BinaryImage:
    """Sauvola, NICK, or T.R. Singh thresholding over clipped local windows.

    Thresholds, with m the window mean and NP the window pixel count:

    * sauvola:  T = m * (1 + k * (s / R - 1)), s the window stddev
    * nick:     T = m + k * sqrt((sum(p^2) - m^2) / NP)
                (the variance term exactly as originally published, not the
                textbook corrected variant)
    * trsingh:  T = m * (1 + k * (d / (1 - d) - 1)), d = (I - m) / 255

    A pixel is ink iff I <= T.
    """
    if method not in LOCAL_METHODS:
        raise ParameterError(f"unknown local method {method!r}")
    px = _require_gray(gray)
    k = params.k if params.k is not None else DEFAULT_K[method]
    cnt, s1, s2 = _window_mean_and_sums(gray, params.window)
    m = s1 / cnt
    val = px.astype(np.float64)

    if method == "sauvola":
        s = np.sqrt(np.maximum(s2 / cnt - m * m, 0.0))
        thresh = m * (1.0 + k * (s / params.r - 1.0))
    elif method == "nick":
        thresh = m + k * np.sqrt(np.maximum((s2 - m * m) / cnt, 0.0))
    else:  # trsingh
        d = (val - m) / 255.0
        thresh = m * (1.0 + k * (d / (1.0 - d) - 1.0))

    return BinaryImage(val <= thresh)


def _su_contrast(px: np.ndarray) -> np.ndarray:
    """Local image contrast: (max - min) / (max + min + 1e-8) over 3x3
    neighborhoods clipped to the image."""
    h, w = px.shape
    mx = np.zeros((h, w), dtype=np.uint8)
    mn = np.full((h, w), 255, dtype=np.uint8)
    padded_max = np.zeros((h + 2, w + 2), dtype=np.uint8)
    padded_max[1:-1, 1:-1] = px
    padded_min = np.full((h + 2, w + 2), 255, dtype=np.uint8)
    padded_min[1:-1, 1:-1] = px
    for dy in range(3):
        for dx in range(3):
            np.maximum(mx, padded_max[dy : dy + h, dx : dx + w], out=mx)
            np.minimum(mn, padded_min[dy : dy + h, dx : dx + w], out=mn)
    mxf = mx.astype(np.float64)
    mnf = mn.astype(np.float64)
    return (mxf - mnf) / (mxf + mnf + 1e-8)


def su_high_contrast(px: np.ndarray) -> np.ndarray:
    """High-contrast pixel mask for Su binarization.

    The contrast image is quantized to 8 bits (round half away from zero)
    and split by Otsu; the upper class is high contrast. A constant contrast
    image has no split and yields an empty mask.
    """
    c = _su_contrast(px)
    cq = np.floor(c * 255.0 + 0.5).astype(np.uint8)
    if int(cq.min()) == int(cq.max()):
        return np.zeros_like(cq, dtype=bool)
    t = otsu_threshold(np.bincount(cq.ravel(), minlength=256))
    return cq >= t


def binarize_su(gray: RasterImage, params: LocalThreshParams) -> BinaryImage:
    """Su's contrast-guided binarization.

    A pixel is ink iff at least ``minn`` high-contrast pixels fall in its
    window and its value is <= mean_hc + stddev_hc / 2, where the statistics
    are over the high-contrast pixels inside the window. ``minn`` defaults
    to the window side length.
    """
    px = _require_gray(gray)
    minn = params.minn if params.minn is not None else params.window
    hc = su_high_contrast(px)

    hci = hc.astype(np.int64)
    vals = px.astype(np.int64)
    n_hc = windowed_sum(cumulative_table(hci), params.window)
    s_hc = windowed_sum(cumulative_table(hci * vals), params.window)
    s2_hc = windowed_sum(cumulative_table(hci * vals * vals), params.window)

    n = n_hc.astype(np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        mean_hc = np.where(n_hc > 0, s_hc / n, 0.0)
        var_hc = np.where(n_hc > 0, s2_hc / n - mean_hc * mean_hc, 0.0)
    std_hc = np.sqrt(np.maximum(var_hc, 0.0))
    ink = (n_hc >= minn) & (n_hc > 0) & (px.astype(np.float64) <= mean_hc + std_hc / 2.0)
    return BinaryImage(ink)


def _box3_filter(px: np.ndarray) -> np.ndarray:
    """3x3 mean low-pass (clipped windows), rounded half away from zero."""
    tab = cumulative_table(px.astype(np.int64))
    s = windowed_sum(tab, 3).astype(np.float64)
    cnt = window_counts(px.shape[0], px.shape[1], 3).astype(np.float64)
    return np.floor(s / cnt + 0.5).astype(np.uint8)


def binarize_gatos(
    gray: RasterImage,
    params: LocalThreshParams,
    q: float = GATOS_Q,
    p1: float = GATOS_P1,
    p2: float = GATOS_P2,
) -> BinaryImage:
    """Gatos background-surface binarization.

    Stages, each consuming the previous stage's output:

    1. 3x3 low-pass pre-filter.
    2. Rough Sauvola pass (k = 0.2, R = 128, the caller's window) for a
       first ink/background split.
    3. Background surface B: background pixels keep their filtered value;
       rough-ink pixels take the mean filtered value of background pixels in
       a (2 * glyph + 1)-sided window, falling back to the global background
       mean when the window holds none.
    4. Final decision: ink iff B - I > d(B), with the adaptive distance

           d(B) = q * delta * ((1 - p2) / (1 + exp(-4 B / (b (1 - p1))
                  + 2 (1 + p1) / (1 - p1))) + p2)

       where delta is the mean of B - I over rough ink and b the mean
       background value.

    A rough pass that finds no ink short-circuits to an all-background
    result; a rough pass that finds only ink leaves no background sample to
    estimate from and raises an error.
    """
    px = _require_gray(gray)
    if params.glyph is None:
        raise ParameterError("gatos requires the glyph parameter")
    for name, v in (("q", q), ("p1", p1), ("p2", p2)):
        if not math.isfinite(v):
            raise ParameterError(f"{name} must be finite")
    if not (0.0 < p1 < 1.0):
        raise ParameterError(f"p1 must lie in (0, 1), got {p1}")

    filt = _box3_filter(px)
    rough = binarize_local(
        RasterImage(filt), "sauvola", LocalThreshParams(window=params.window, k=0.2, r=128.0)
    )
    s = rough.mask
    n_ink = int(s.sum())
    if n_ink == 0:
        return BinaryImage(np.zeros_like(s))
    if n_ink == s.size:
        raise PapyrionError("background estimation impossible: rough pass marked everything ink")

    bg = ~s
    f64 = filt.astype(np.float64)
    bg_i = bg.astype(np.int64)
    vals = filt.astype(np.int64)
    win_b = 2 * params.glyph + 1
    n_bg = windowed_sum(cumulative_table(bg_i), win_b)
    s_bg = windowed_sum(cumulative_table(bg_i * vals), win_b)
    global_bg_mean = float(int(vals[bg].sum()) / int(bg.sum()))
    with np.errstate(divide="ignore", invalid="ignore"):
        local_bg = np.where(n_bg > 0, s_bg / n_bg.astype(np.float64), global_bg_mean)
    surface = np.where(bg, f64, local_bg)

    # Order-independent summation keeps the adaptive threshold identical to a
    # per-pixel reference evaluation.
    delta = math.fsum((surface - f64)[s].tolist()) / n_ink
    b_mean = global_bg_mean  # surface equals the filtered value on background
    if b_mean <= 0.0:
        b_mean = 1e-8
    expo = -4.0 * surface / (b_mean * (1.0 - p1)) + 2.0 * (1.0 + p1) / (1.0 - p1)
    dist = q * delta * ((1.0 - p2) / (1.0 + np.exp(expo)) + p2)
    return BinaryImage(surface - f64 > dist)


def binarize_method(
    gray: RasterImage,
    method: str,
    params: LocalThreshParams | None = None,
    q: float = GATOS_Q,
    p1: float = GATOS_P1,
    p2: float = GATOS_P2,
) -> BinaryImage:
    """Dispatch a method name to its implementation."""
    if method == "otsu":
        return binarize_otsu(gray)
    if params is None:
        raise ParameterError(f"method {method!r} requires window parameters")
    if method in LOCAL_METHODS:
        return binarize_local(gray, method, params)
    if method == "su":
        return binarize_su(gray, params)
    if method == "gatos":
        return binarize_gatos(gray, params, q=q, p1=p1, p2=p2)
    raise ParameterError(f"unknown binarization method {method!r}")


# ---------------------------------------------------------------------------
# grid search

OBJECTIVES = ("fm", "pfm", "psnr", "drd")


@dataclass(frozen=True)
class GridSpec:
    """Parameter grid for the search. Methods without a second parameter use
    only ``windows``; su crosses windows with ``minn_values`` and gatos with
    ``glyph_values``."""

    methods: tuple[str, ...]
    windows: tuple[int, ...] = ()
    minn_values: tuple[int, ...] = ()
    glyph_values: tuple[int, ...] = ()

    def __post_init__(self) -> None:
        if not self.methods:
            raise ParameterError("grid needs at least one method")
        seen = set()
        for m in self.methods:
            if m not in METHODS:
                raise ParameterError(f"unknown binarization method {m!r}")
            if m in seen:
                raise ParameterError(f"duplicate method {m!r} in grid")
            seen.add(m)
        needs_window = [m for m in self.methods if m != "otsu"]
        if needs_window and not self.windows:
            raise ParameterError(f"empty window grid for methods {needs_window}")
        for w in self.windows:
            if w < 3 or w % 2 == 0:
                raise ParameterError(f"window values must be odd and >= 3, got {w}")
        if "su" in self.methods and not self.minn_values:
            raise ParameterError("su in grid but no minn values")
        for v in self.minn_values:
            if v < 1:
                raise ParameterError(f"minn values must be >= 1, got {v}")
        if "gatos" in self.methods and not self.glyph_values:
            raise ParameterError("gatos in grid but no glyph values")
        for v in self.glyph_values:
            if v < 1:
                raise ParameterError(f"glyph values must be >= 1, got {v}")


@dataclass(frozen=True)
class GridResult:
    method: str
    window: int | None
    second_name: str | None
    second_value: int | None
    score: float


def _method_cells(spec: GridSpec, method: str):
    """Cells in tie-break order: window ascending, then second parameter."""
    if method == "otsu":
        return [(None, None)]
    windows = sorted(spec.windows)
    if method == "su":
        return [(w, n) for w in windows for n in sorted(spec.minn_values)]
    if method == "gatos":
        return [(w, g) for w in windows for g in sorted(spec.glyph_values)]
    return [(w, None) for w in windows]


_SECOND_NAME = {"su": "minn", "gatos": "glyph"}


def _score_cell(method, window, second, pairs, objective, skeletons):
    scores = []
    for idx, (gray, gt) in enumerate(pairs):
        if method == "otsu":
            pred = binarize_otsu(gray)
        elif method == "su":
            pred = binarize_su(gray, LocalThreshParams(window=window, minn=second))
        elif method == "gatos":
            pred = binarize_gatos(gray, LocalThreshParams(window=window, glyph=second))
        else:
            pred = binarize_local(gray, method, LocalThreshParams(window=window))
        if objective == "fm":
            scores.append(metrics.f_measure(metrics.confusion(pred, gt)))
        elif objective == "pfm":
            scores.append(metrics.pseudo_f_measure(pred, gt, gt_skeleton=skeletons[idx]))
        elif objective == "psnr":
            scores.append(metrics.psnr(pred, gt))
        else:
            scores.append(metrics.drd(pred, gt))
    return math.fsum(scores) / len(scores)


def grid_search(
    pairs: list[tuple[RasterImage, BinaryImage]],
    spec: GridSpec,
    objective: str = "fm",
    threads: int = 1,
) -> tuple[dict[str, GridResult], list[GridResult]]:
    """Exhaustive parameter sweep.

    Returns (best score per method, full score table). The score of a cell
    is the mean objective over all image pairs. DRD is minimized, the other
    objectives maximized. Ties go to the smaller window, then the smaller
    second parameter, which falls out of evaluating cells in sorted order
    with strict improvement.
    """
    if objective not in OBJECTIVES:
        raise ParameterError(f"unknown objective {objective!r}")
    if not pairs:
        raise ParameterError("grid search needs at least one image pair")
    skeletons = None
    if objective == "pfm":
        skeletons = [skeletonize(gt) for _, gt in pairs]

    tasks = []
    for method in spec.methods:
        for window, second in _method_cells(spec, method):
            tasks.append((method, window, second))

    def run(task):
        method, window, second = task
        return _score_cell(method, window, second, pairs, objective, skeletons)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            scores = list(pool.map(run, tasks))
    else:
        scores = [run(t) for t in tasks]

    minimize = objective == "drd"
    table: list[GridResult] = []
    best: dict[str, GridResult] = {}
    for (method, window, second), score in zip(tasks, scores):
        row = GridResult(
            method=method,
            window=window,
            second_name=_SECOND_NAME.get(method),
            second_value=second,
            score=score,
        )
        table.append(row)
        cur = best.get(method)
        if cur is None or (score < cur.score if minimize else score > cur.score):
            best[method] = row
    return best, table
