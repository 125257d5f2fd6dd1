"""Image model, grayscale conversion, integral images, thinning, and file I/O.

All pixel data is 8-bit. Images are immutable after construction (the backing
arrays are marked read-only) so they can be shared freely between threads.

Binary images follow the document-analysis convention throughout: True means
ink. On disk, ink is 0 (black) and background is 255 (white).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from papyrion.errors import PapyrionError, ParameterError

__all__ = [
    "RasterImage",
    "BinaryImage",
    "IntegralImage",
    "to_grayscale",
    "to_rgb",
    "integral_build",
    "cumulative_table",
    "windowed_sum",
    "skeletonize",
    "load_image",
    "save_image",
    "load_binary",
    "save_binary",
]

log = logging.getLogger("papyrion.imgcore")


@dataclass(frozen=True)
class RasterImage:
    """8-bit raster image: (h, w) for grayscale, (h, w, 3|4) for RGB/RGBA.

    Rows are stored top to bottom, samples interleaved, C-contiguous.
    """

    px: np.ndarray

    def __post_init__(self) -> None:
        px = np.asarray(self.px)
        if px.dtype != np.uint8:
            raise ParameterError(f"image pixels must be uint8, got {px.dtype}")
        if px.ndim == 3 and px.shape[2] == 1:
            px = px[:, :, 0]
        if px.ndim == 2:
            pass
        elif px.ndim == 3 and px.shape[2] in (3, 4):
            pass
        else:
            raise ParameterError(f"unsupported image shape {px.shape}")
        if px.shape[0] < 1 or px.shape[1] < 1:
            raise ParameterError("image must be at least 1x1")
        px = np.ascontiguousarray(px)
        px.setflags(write=False)
        object.__setattr__(self, "px", px)

    @property
    def height(self) -> int:
        return self.px.shape[0]

    @property
    def width(self) -> int:
        return self.px.shape[1]

    @property
    def channels(self) -> int:
        return 1 if self.px.ndim == 2 else self.px.shape[2]


@dataclass(frozen=True)
class BinaryImage:
    """Boolean ink mask; True = ink, False = background."""

    mask: np.ndarray

    def __post_init__(self) -> None:
        mask = np.asarray(self.mask)
        if mask.dtype != np.bool_:
            raise ParameterError(f"binary mask must be bool, got {mask.dtype}")
        if mask.ndim != 2 or mask.shape[0] < 1 or mask.shape[1] < 1:
            raise ParameterError(f"binary mask must be 2-D, got shape {mask.shape}")
        mask = np.ascontiguousarray(mask)
        mask.setflags(write=False)
        object.__setattr__(self, "mask", mask)

    @property
    def height(self) -> int:
        return self.mask.shape[0]

    @property
    def width(self) -> int:
        return self.mask.shape[1]

    def ink_count(self) -> int:
        return int(self.mask.sum())


def to_grayscale(img: RasterImage) -> RasterImage:
    """Collapse RGB(A) to 8-bit luma: round(0.299 R + 0.587 G + 0.114 B).

    Rounding is half away from zero. Alpha, if present, is ignored.
    Grayscale input is returned unchanged.
    """
    if img.channels == 1:
        return img
    rgb = img.px[:, :, :3].astype(np.float64)
    y = 0.299 * rgb[:, :, 0] + 0.587 * rgb[:, :, 1] + 0.114 * rgb[:, :, 2]
    out = np.floor(y + 0.5)
    return RasterImage(np.clip(out, 0, 255).astype(np.uint8))


def to_rgb(img: RasterImage) -> RasterImage:
    """Expand to 3 channels: grayscale is replicated, RGBA drops alpha."""
    if img.channels == 3:
        return img
    if img.channels == 1:
        return RasterImage(np.repeat(img.px[:, :, None], 3, axis=2))
    return RasterImage(np.ascontiguousarray(img.px[:, :, :3]))


# ---------------------------------------------------------------------------
# integral images


def cumulative_table(arr: np.ndarray) -> np.ndarray:
    """(h+1, w+1) int64 summed-area table of an integer array.

    table[y, x] holds the sum over rows [0, y) and columns [0, x); the extra
    zero row/column makes every rectangle query a four-corner lookup.
    """
    a = np.asarray(arr, dtype=np.int64)
    h, w = a.shape
    tab = np.zeros((h + 1, w + 1), dtype=np.int64)
    tab[1:, 1:] = a.cumsum(axis=0).cumsum(axis=1)
    return tab


def windowed_sum(table: np.ndarray, window: int) -> np.ndarray:
    """Per-pixel sum over a centered square window clipped to the image.

    No padding is involved: border pixels sum over the window/image
    intersection only.
    """
    if window < 1 or window % 2 == 0:
        raise ParameterError(f"window must be odd and >= 1, got {window}")
    h, w = table.shape[0] - 1, table.shape[1] - 1
    r = window // 2
    y0 = np.clip(np.arange(h) - r, 0, h)
    y1 = np.clip(np.arange(h) + r + 1, 0, h)
    x0 = np.clip(np.arange(w) - r, 0, w)
    x1 = np.clip(np.arange(w) + r + 1, 0, w)
    return (
        table[y1[:, None], x1[None, :]]
        - table[y0[:, None], x1[None, :]]
        - table[y1[:, None], x0[None, :]]
        + table[y0[:, None], x0[None, :]]
    )


def window_counts(height: int, width: int, window: int) -> np.ndarray:
    """Number of in-image pixels in each centered, clipped window."""
    if window < 1 or window % 2 == 0:
        raise ParameterError(f"window must be odd and >= 1, got {window}")
    r = window // 2
    ny = np.clip(np.arange(height) + r + 1, 0, height) - np.clip(np.arange(height) - r, 0, height)
    nx = np.clip(np.arange(width) + r + 1, 0, width) - np.clip(np.arange(width) - r, 0, width)
    return ny[:, None] * nx[None, :]


@dataclass(frozen=True)
class IntegralImage:
    """Summed-area tables of a grayscale image and of its squared values.

    Accumulators are int64, which is exact for 8-bit sources up to 2^32
    pixels (255^2 * 2^32 < 2^63), so every rectangle sum is exact.
    """

    sums: np.ndarray
    sqsums: np.ndarray

    @property
    def height(self) -> int:
        return self.sums.shape[0] - 1

    @property
    def width(self) -> int:
        return self.sums.shape[1] - 1

    def rect_sum(self, x0: int, y0: int, x1: int, y1: int) -> int:
        """Sum over the half-open rectangle [x0, x1) x [y0, y1)."""
        self._check_rect(x0, y0, x1, y1)
        t = self.sums
        return int(t[y1, x1] - t[y0, x1] - t[y1, x0] + t[y0, x0])

    def rect_sqsum(self, x0: int, y0: int, x1: int, y1: int) -> int:
        """Sum of squared values over [x0, x1) x [y0, y1)."""
        self._check_rect(x0, y0, x1, y1)
        t = self.sqsums
        return int(t[y1, x1] - t[y0, x1] - t[y1, x0] + t[y0, x0])

    def _check_rect(self, x0: int, y0: int, x1: int, y1: int) -> None:
        if not (0 <= x0 < x1 <= self.width and 0 <= y0 < y1 <= self.height):
            raise ParameterError(
                f"rectangle ({x0},{y0})-({x1},{y1}) outside image {self.width}x{self.height}"
            )

    def window_stats(self, window: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Per-pixel (count, sum, sum of squares) over clipped windows."""
        cnt = window_counts(self.height, self.width, window)
        return cnt, windowed_sum(self.sums, window), windowed_sum(self.sqsums, window)


def integral_build(img: RasterImage) -> IntegralImage:
    if img.channels != 1:
        raise ParameterError("integral images are defined for grayscale input")
    a = img.px.astype(np.int64)
    return IntegralImage(sums=cumulative_table(a), sqsums=cumulative_table(a * a))


# ---------------------------------------------------------------------------
# thinning

# Neighbor order around P1 is the usual P2..P9 = N, NE, E, SE, S, SW, W, NW.
_NEIGHBOR_OFFSETS = [
    (-1, 0), (-1, 1), (0, 1), (1, 1), (1, 0), (1, -1), (0, -1), (-1, -1),
]


def skeletonize(b: BinaryImage) -> BinaryImage:
    """Zhang-Suen parallel thinning.

    Repeats the two sub-iterations until a full pass deletes nothing, so the
    result is a fixed point: skeletonize(skeletonize(x)) == skeletonize(x).
    The skeleton is always a subset of the input ink. Like the original
    algorithm, isolated 2x2 blobs are erased entirely; stroke-like components
    keep their connectivity.
    """
    img = b.mask.astype(np.uint8)
    h, w = img.shape
    pad = np.zeros((h + 2, w + 2), dtype=np.uint8)
    pad[1:-1, 1:-1] = img

    while True:
        changed = False
        for step in (0, 1):
            core = pad[1:-1, 1:-1]
            nbs = [
                pad[1 + dy : 1 + dy + h, 1 + dx : 1 + dx + w]
                for dy, dx in _NEIGHBOR_OFFSETS
            ]
            p2, p3, p4, p5, p6, p7, p8, p9 = nbs
            bsum = np.zeros((h, w), dtype=np.int32)
            for nb in nbs:
                bsum += nb
            trans = np.zeros((h, w), dtype=np.int32)
            ring = nbs + [nbs[0]]
            for a, nxt in zip(ring[:-1], ring[1:]):
                trans += (a == 0) & (nxt == 1)
            cond = (core == 1) & (bsum >= 2) & (bsum <= 6) & (trans == 1)
            if step == 0:
                cond &= (p2 * p4 * p6 == 0) & (p4 * p6 * p8 == 0)
            else:
                cond &= (p2 * p4 * p8 == 0) & (p2 * p6 * p8 == 0)
            if cond.any():
                new = core.copy()
                new[cond] = 0
                pad[1:-1, 1:-1] = new
                changed = True
        if not changed:
            break
    return BinaryImage(pad[1:-1, 1:-1].astype(bool))


# ---------------------------------------------------------------------------
# file I/O

_SAVE_FORMATS = {".png": "PNG", ".pgm": "PPM", ".ppm": "PPM"}


def load_image(path: str | Path) -> RasterImage:
    """Read a PNG/PGM/PPM file as an 8-bit RasterImage.

    Palette images are expanded to RGB, gray+alpha to RGBA. 16-bit and other
    exotic modes are rejected.
    """
    path = Path(path)
    try:
        with Image.open(path) as im:
            im.load()
            mode = im.mode
            if mode == "P":
                im = im.convert("RGBA" if "transparency" in im.info else "RGB")
            elif mode == "LA":
                im = im.convert("RGBA")
            elif mode == "1":
                im = im.convert("L")
            elif mode not in ("L", "RGB", "RGBA"):
                raise PapyrionError(f"unsupported image mode {mode!r} in {path.name}")
            return RasterImage(np.asarray(im, dtype=np.uint8))
    except FileNotFoundError:
        raise PapyrionError(f"no such image file: {path}") from None
    except Image.UnidentifiedImageError:
        raise PapyrionError(f"not a readable image file: {path}") from None


def save_image(img: RasterImage, path: str | Path) -> None:
    """Write PNG (any channel count) or binary PGM/PPM (gray/RGB only)."""
    path = Path(path)
    ext = path.suffix.lower()
    if ext not in _SAVE_FORMATS:
        raise ParameterError(f"unsupported output extension {ext!r} (use .png/.pgm/.ppm)")
    if ext == ".pgm" and img.channels != 1:
        raise ParameterError("PGM output requires a grayscale image")
    if ext == ".ppm" and img.channels != 3:
        raise ParameterError("PPM output requires an RGB image")
    if ext != ".png" and img.channels == 4:
        raise ParameterError("alpha channels can only be written to PNG")
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(img.px).save(path, format=_SAVE_FORMATS[ext])


def load_binary(path: str | Path) -> BinaryImage:
    """Read a stored binarization: values below 128 count as ink."""
    img = load_image(path)
    gray = to_grayscale(img)
    return BinaryImage(gray.px < 128)


def save_binary(b: BinaryImage, path: str | Path) -> None:
    """Write ink as 0 (black) and background as 255 (white)."""
    px = np.where(b.mask, 0, 255).astype(np.uint8)
    save_image(RasterImage(px), path)
