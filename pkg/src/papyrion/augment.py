"""Papyrus augmentation: text removal, fragment extraction, composition.

The pipeline turns a writer-labeled papyrus photo into reusable material:

* ``text_mask``        locate ink, dilate by one pixel
* ``inpaint_telea``    erase the masked ink by fast-marching inpainting
* ``extract_fragment`` cut the papyrus silhouette out of its bright backdrop
* ``compose_augmented`` blend a texture over a source page and stamp the
  fragment silhouette on top

``augment_corpus`` drives the whole thing over directories with per-output
sub-seeds, so a re-run with the same seed reproduces every byte.
"""

from __future__ import annotations

import heapq
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np
from scipy import ndimage

from papyrion.corpus import fnv1a64
from papyrion.errors import PapyrionError, ParameterError
from papyrion.imgcore import (
    BinaryImage,
    RasterImage,
    load_binary,
    load_image,
    save_image,
    to_grayscale,
    to_rgb,
)

__all__ = [
    "AugmentConfig",
    "FragmentOverlay",
    "dilate8",
    "text_mask",
    "inpaint_telea",
    "extract_fragment",
    "compose_augmented",
    "resize_bilinear",
    "resize_nearest",
    "derive_subseed",
    "augment_corpus",
]

log = logging.getLogger("papyrion.augment")


@dataclass(frozen=True)
class AugmentConfig:
    """Knobs for the composition driver.

    ``texture_alpha`` is the texture's opacity in the blend; the default
    0.70 leaves 30 percent of the source page showing through.
    """

    inpaint_radius: int = 5
    texture_alpha: float = 0.70
    bg_threshold: int = 170
    seed: int = 0

    def __post_init__(self) -> None:
        if self.inpaint_radius < 1:
            raise ParameterError(f"inpaint radius must be >= 1, got {self.inpaint_radius}")
        if not (0.0 <= self.texture_alpha <= 1.0):
            raise ParameterError(f"texture alpha must lie in [0, 1], got {self.texture_alpha}")
        if not (0 <= self.bg_threshold <= 255):
            raise ParameterError(f"bg threshold must lie in [0, 255], got {self.bg_threshold}")


@dataclass(frozen=True)
class FragmentOverlay:
    """RGBA image that is fully transparent over the papyrus fragment and
    opaque (keeping the photographed backdrop) everywhere else."""

    image: RasterImage

    def __post_init__(self) -> None:
        if self.image.channels != 4:
            raise ParameterError("fragment overlay must be RGBA")
        alpha = self.image.px[:, :, 3]
        if not np.isin(alpha, (0, 255)).all():
            raise ParameterError("fragment overlay alpha must be exactly 0 or 255")

    @property
    def alpha(self) -> np.ndarray:
        return self.image.px[:, :, 3]


def dilate8(mask: np.ndarray) -> np.ndarray:
    """One-pixel dilation with the full 8-neighborhood."""
    m = np.asarray(mask, dtype=bool)
    h, w = m.shape
    pad = np.zeros((h + 2, w + 2), dtype=bool)
    pad[1:-1, 1:-1] = m
    out = np.zeros((h, w), dtype=bool)
    for dy in range(3):
        for dx in range(3):
            out |= pad[dy : dy + h, dx : dx + w]
    return out


def text_mask(
    papyrus: RasterImage,
    binarizer: Callable[[RasterImage], BinaryImage] | None = None,
    external: BinaryImage | None = None,
) -> BinaryImage:
    """Ink mask for inpainting: binarize (or take the supplied mask), then
    dilate by one pixel so stroke borders are covered too."""
    if (binarizer is None) == (external is None):
        raise ParameterError("text_mask needs exactly one of binarizer or external mask")
    if external is not None:
        if external.mask.shape != (papyrus.height, papyrus.width):
            raise PapyrionError("external mask size does not match the image")
        base = external.mask
    else:
        base = binarizer(to_grayscale(papyrus)).mask
    return BinaryImage(dilate8(base))


# ---------------------------------------------------------------------------
# fast-marching inpainting

_KNOWN, _BAND, _INSIDE = 0, 1, 2
_FAR = 1.0e6


def _eikonal_solve(t1: float, ok1: bool, t2: float, ok2: bool) -> float:
    """First-order update from two orthogonal accepted neighbors."""
    if ok1 and ok2:
        if abs(t1 - t2) < 1.0:
            return (t1 + t2 + math.sqrt(2.0 - (t1 - t2) ** 2)) / 2.0
        return min(t1, t2) + 1.0
    if ok1:
        return t1 + 1.0
    if ok2:
        return t2 + 1.0
    return _FAR


def _disk_offsets(radius: int) -> np.ndarray:
    offs = [
        (dy, dx)
        for dy in range(-radius, radius + 1)
        for dx in range(-radius, radius + 1)
        if (dy or dx) and dy * dy + dx * dx <= radius * radius
    ]
    return np.array(offs, dtype=np.int64)


def inpaint_telea(img: RasterImage, mask: BinaryImage, radius: int = 5) -> RasterImage:
    """Fill the masked pixels by Telea's fast-marching method.

    Mask pixels are filled in increasing distance from the mask boundary.
    Each fill is a weighted average of first-order extrapolations from the
    already-known pixels within ``radius``; weights multiply a directional
    factor (alignment with the marching front), a geometric factor (inverse
    squared distance), and a level-set factor (closeness of arrival times).
    Pixels outside the mask are returned bit for bit unchanged.
    """
    if radius < 1:
        raise ParameterError(f"inpaint radius must be >= 1, got {radius}")
    m = mask.mask
    if m.shape != (img.height, img.width):
        raise PapyrionError("inpainting mask size does not match the image")
    if not m.any():
        return img
    if m.all():
        raise PapyrionError("no boundary to march from: mask covers the whole image")

    h, w = m.shape
    work = img.px.astype(np.float64)
    squeeze = work.ndim == 2
    if squeeze:
        work = work[:, :, None]
    nch = work.shape[2]

    # Arrival times: 0 on the known ring next to the mask, negative farther
    # outside (euclidean distances), large inside until solved.
    dist_out = ndimage.distance_transform_edt(~m)
    t = np.where(m, _FAR, -(dist_out - 1.0))
    flags = np.where(m, _INSIDE, _KNOWN).astype(np.int8)

    # Padded views make neighbor lookups branch-free; the border ring is
    # flagged INSIDE so it never contributes.
    tp = np.full((h + 2, w + 2), _FAR, dtype=np.float64)
    tp[1:-1, 1:-1] = t
    fp = np.full((h + 2, w + 2), _INSIDE, dtype=np.int8)
    fp[1:-1, 1:-1] = flags
    wp = np.zeros((h + 2, w + 2, nch), dtype=np.float64)
    wp[1:-1, 1:-1] = work

    offs = _disk_offsets(radius)
    off_y = offs[:, 0]
    off_x = offs[:, 1]
    off_len = np.sqrt((offs * offs).sum(axis=1).astype(np.float64))

    inside_y, inside_x = np.nonzero(m)
    ring = set()
    for y, x in zip(inside_y.tolist(), inside_x.tolist()):
        for dy, dx in ((-1, 0), (1, 0), (0, -1), (0, 1)):
            ny, nx = y + dy, x + dx
            if 0 <= ny < h and 0 <= nx < w and not m[ny, nx]:
                ring.add((ny, nx))

    heap: list[tuple[float, int, int, int]] = []
    tick = 0
    for y, x in sorted(ring):
        fp[y + 1, x + 1] = _BAND
        heapq.heappush(heap, (tp[y + 1, x + 1], tick, y, x))
        tick += 1

    def grad_t(y: int, x: int) -> tuple[float, float]:
        py, px = y + 1, x + 1
        pairs = []
        for minus, plus in (((py, px - 1), (py, px + 1)), ((py - 1, px), (py + 1, px))):
            ok_m = fp[minus] != _INSIDE
            ok_p = fp[plus] != _INSIDE
            if ok_m and ok_p:
                pairs.append((tp[plus] - tp[minus]) / 2.0)
            elif ok_p:
                pairs.append(tp[plus] - tp[py, px])
            elif ok_m:
                pairs.append(tp[py, px] - tp[minus])
            else:
                pairs.append(0.0)
        return pairs[0], pairs[1]  # (d/dx, d/dy)

    def paint(y: int, x: int) -> None:
        gx, gy = grad_t(y, x)
        ny = off_y + y
        nx = off_x + x
        # the sampling disk stops at the image edge
        inb = (ny >= 0) & (ny < h) & (nx >= 0) & (nx < w)
        ny = ny[inb]
        nx = nx[inb]
        valid = fp[ny + 1, nx + 1] == _KNOWN
        if not valid.any():
            return
        vy = ny[valid]
        vx = nx[valid]
        ry = (y - vy).astype(np.float64)
        rx = (x - vx).astype(np.float64)
        length = off_len[inb][valid]
        direction = (rx * gx + ry * gy) / length
        small = np.abs(direction) < 1e-6
        direction[small] = 1e-6
        dst = 1.0 / (length * length)
        lev = 1.0 / (1.0 + np.abs(tp[vy + 1, vx + 1] - tp[y + 1, x + 1]))
        wgt = np.abs(direction * dst * lev)

        # per-axis first-order image gradients at the known samples
        usable_r = fp[vy + 1, vx + 2] != _INSIDE
        usable_l = fp[vy + 1, vx] != _INSIDE
        usable_d = fp[vy + 2, vx + 1] != _INSIDE
        usable_u = fp[vy, vx + 1] != _INSIDE
        num = np.zeros(nch, dtype=np.float64)
        for c in range(nch):
            ch = wp[:, :, c]
            here = ch[vy + 1, vx + 1]
            gix = np.where(
                usable_r & usable_l,
                (ch[vy + 1, vx + 2] - ch[vy + 1, vx]) / 2.0,
                np.where(
                    usable_r,
                    ch[vy + 1, vx + 2] - here,
                    np.where(usable_l, here - ch[vy + 1, vx], 0.0),
                ),
            )
            giy = np.where(
                usable_d & usable_u,
                (ch[vy + 2, vx + 1] - ch[vy, vx + 1]) / 2.0,
                np.where(
                    usable_d,
                    ch[vy + 2, vx + 1] - here,
                    np.where(usable_u, here - ch[vy, vx + 1], 0.0),
                ),
            )
            est = here + gix * rx + giy * ry
            num[c] = float((wgt * est).sum())
        den = float(wgt.sum())
        wp[y + 1, x + 1] = num / den

    while heap:
        cur_t, _, y, x = heapq.heappop(heap)
        py, px = y + 1, x + 1
        if fp[py, px] == _KNOWN:
            continue
        fp[py, px] = _KNOWN
        for dy, dx in ((-1, 0), (1, 0), (0, -1), (0, 1)):
            qy, qx = y + dy, x + dx
            if not (0 <= qy < h and 0 <= qx < w):
                continue
            fq = fp[qy + 1, qx + 1]
            if fq == _KNOWN:
                continue
            sol = min(
                _eikonal_solve(
                    tp[qy + 1, qx], fp[qy + 1, qx] == _KNOWN,
                    tp[qy, qx + 1], fp[qy, qx + 1] == _KNOWN,
                ),
                _eikonal_solve(
                    tp[qy + 1, qx + 2], fp[qy + 1, qx + 2] == _KNOWN,
                    tp[qy, qx + 1], fp[qy, qx + 1] == _KNOWN,
                ),
                _eikonal_solve(
                    tp[qy + 1, qx], fp[qy + 1, qx] == _KNOWN,
                    tp[qy + 2, qx + 1], fp[qy + 2, qx + 1] == _KNOWN,
                ),
                _eikonal_solve(
                    tp[qy + 1, qx + 2], fp[qy + 1, qx + 2] == _KNOWN,
                    tp[qy + 2, qx + 1], fp[qy + 2, qx + 1] == _KNOWN,
                ),
            )
            if fq == _INSIDE:
                tp[qy + 1, qx + 1] = sol
                paint(qy, qx)
                fp[qy + 1, qx + 1] = _BAND
                heapq.heappush(heap, (sol, tick, qy, qx))
                tick += 1
            elif sol < tp[qy + 1, qx + 1]:
                tp[qy + 1, qx + 1] = sol
                heapq.heappush(heap, (sol, tick, qy, qx))
                tick += 1

    filled = wp[1:-1, 1:-1]
    out = np.clip(np.floor(filled + 0.5), 0, 255).astype(np.uint8)
    if squeeze:
        out = out[:, :, 0]
    result = np.array(img.px, copy=True)
    result[m] = out[m]
    return RasterImage(result)


# ---------------------------------------------------------------------------
# fragment extraction

_FOUR_CONNECTED = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]], dtype=bool)


def _border_bright_fraction(gray_px: np.ndarray, threshold: int) -> float:
    top = gray_px[0, :]
    bottom = gray_px[-1, :]
    left = gray_px[1:-1, 0]
    right = gray_px[1:-1, -1]
    border = np.concatenate([top, bottom, left, right])
    return float(np.count_nonzero(border > threshold)) / border.size


def extract_fragment(papyrus: RasterImage, bg_threshold: int = 170) -> FragmentOverlay:
    """Split a photographed papyrus from its bright backdrop.

    Pixels with luma above ``bg_threshold`` that belong to the largest
    4-connected bright region touching the image border count as backdrop
    and stay opaque; everything else (the fragment) becomes transparent.
    Images whose border is less than 1 percent bright are rejected as
    "background too dark".
    """
    if not (0 <= bg_threshold <= 255):
        raise ParameterError(f"bg threshold must lie in [0, 255], got {bg_threshold}")
    gray = to_grayscale(papyrus)
    if _border_bright_fraction(gray.px, bg_threshold) < 0.01:
        raise PapyrionError("background too dark: border is not bright enough to anchor")
    bright = gray.px > bg_threshold
    labels, _ = ndimage.label(bright, structure=_FOUR_CONNECTED)
    border_labels = np.unique(
        np.concatenate([labels[0, :], labels[-1, :], labels[:, 0], labels[:, -1]])
    )
    border_labels = border_labels[border_labels != 0]
    if border_labels.size == 0:
        raise PapyrionError("background too dark: no bright region touches the border")
    sizes = ndimage.sum_labels(np.ones_like(labels), labels, index=border_labels)
    chosen = int(border_labels[int(np.argmax(sizes))])
    backdrop = labels == chosen

    rgb = to_rgb(papyrus).px
    alpha = np.where(backdrop, 255, 0).astype(np.uint8)
    rgba = np.dstack([rgb, alpha])
    return FragmentOverlay(RasterImage(rgba))


# ---------------------------------------------------------------------------
# resizing and composition


def resize_bilinear(px: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resampling with half-pixel-center alignment, rounded half
    away from zero back to uint8. Same-size calls return the input copy."""
    if out_h < 1 or out_w < 1:
        raise ParameterError("target size must be positive")
    src = np.asarray(px, dtype=np.float64)
    h, w = src.shape[0], src.shape[1]
    sy = np.clip((np.arange(out_h) + 0.5) * (h / out_h) - 0.5, 0, h - 1)
    sx = np.clip((np.arange(out_w) + 0.5) * (w / out_w) - 0.5, 0, w - 1)
    y0 = np.floor(sy).astype(np.int64)
    x0 = np.floor(sx).astype(np.int64)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = sy - y0
    fx = sx - x0
    if src.ndim == 3:
        fy = fy[:, None, None]
        fx = fx[None, :, None]
        a = src[y0[:, None], x0[None, :], :]
        b = src[y0[:, None], x1[None, :], :]
        c = src[y1[:, None], x0[None, :], :]
        d = src[y1[:, None], x1[None, :], :]
    else:
        fy = fy[:, None]
        fx = fx[None, :]
        a = src[y0[:, None], x0[None, :]]
        b = src[y0[:, None], x1[None, :]]
        c = src[y1[:, None], x0[None, :]]
        d = src[y1[:, None], x1[None, :]]
    top = a * (1.0 - fx) + b * fx
    bot = c * (1.0 - fx) + d * fx
    out = top * (1.0 - fy) + bot * fy
    return np.clip(np.floor(out + 0.5), 0, 255).astype(np.uint8)


def resize_nearest(px: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Nearest-neighbor resampling (for masks and alpha layers)."""
    if out_h < 1 or out_w < 1:
        raise ParameterError("target size must be positive")
    src = np.asarray(px)
    h, w = src.shape[0], src.shape[1]
    sy = np.clip(np.floor((np.arange(out_h) + 0.5) * (h / out_h)), 0, h - 1).astype(np.int64)
    sx = np.clip(np.floor((np.arange(out_w) + 0.5) * (w / out_w)), 0, w - 1).astype(np.int64)
    return src[sy[:, None], sx[None, :]] if src.ndim == 2 else src[sy[:, None], sx[None, :], :]


def compose_augmented(
    source: RasterImage,
    texture: RasterImage,
    overlay: FragmentOverlay,
    cfg: AugmentConfig,
) -> RasterImage:
    """Blend the texture over the source, then stamp the fragment backdrop.

    Step 1 per channel: out = alpha * texture + (1 - alpha) * source,
    rounded half away from zero (texture bilinearly resized to the source
    size first). Step 2: overlay pixels with alpha 255 replace the blend;
    transparent pixels leave it visible. The result is RGB.
    """
    src = to_rgb(source).px
    h, w = src.shape[0], src.shape[1]
    tex = resize_bilinear(to_rgb(texture).px, h, w)
    a = cfg.texture_alpha
    blend = a * tex.astype(np.float64) + (1.0 - a) * src.astype(np.float64)
    out1 = np.clip(np.floor(blend + 0.5), 0, 255).astype(np.uint8)

    ov = resize_nearest(overlay.image.px, h, w)
    opaque = ov[:, :, 3] == 255
    out = np.where(opaque[:, :, None], ov[:, :, :3], out1)
    return RasterImage(np.ascontiguousarray(out))


# ---------------------------------------------------------------------------
# corpus driver


def derive_subseed(seed: int, index: int) -> int:
    """Stable per-output sub-seed: FNV-1a of "<seed>:<index>"."""
    return fnv1a64(f"{seed}:{index}".encode("ascii"))


def augment_corpus(
    sources: list[Path],
    papyri: list[Path],
    out_dir: Path,
    cfg: AugmentConfig,
    masks_dir: Path | None = None,
    mask_binarizer: Callable[[RasterImage], BinaryImage] | None = None,
) -> dict:
    """Produce one augmented page per source image.

    For output index i a sub-seed derived from (cfg.seed, i) picks the
    texture papyrus (any) and the overlay papyrus (only images whose border
    passes the brightness check). Textures are papyri with their text masked
    and inpainted away; masks come from ``masks_dir`` by matching stem when
    present, otherwise from ``mask_binarizer``. Returns a manifest dict
    listing the exact inputs and sub-seed behind every output.
    """
    if not sources:
        raise PapyrionError("no source images to augment")
    if not papyri:
        raise PapyrionError("no papyrus images to draw textures from")
    sources = sorted(Path(p) for p in sources)
    papyri = sorted(Path(p) for p in papyri)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    external_masks = {}
    if masks_dir is not None:
        external_masks = {p.stem: p for p in sorted(Path(masks_dir).iterdir()) if p.is_file()}

    eligible = []
    for p in papyri:
        gray = to_grayscale(load_image(p))
        if _border_bright_fraction(gray.px, cfg.bg_threshold) >= 0.01:
            eligible.append(p)
        else:
            log.warning("overlay source skipped (background too dark): %s", p.name)
    if not eligible:
        raise PapyrionError("no papyrus image passes the background brightness check")

    texture_cache: dict[Path, RasterImage] = {}

    def texture_for(path: Path) -> RasterImage:
        if path not in texture_cache:
            image = load_image(path)
            if path.stem in external_masks:
                mask = text_mask(image, external=load_binary(external_masks[path.stem]))
            else:
                if mask_binarizer is None:
                    raise ParameterError("no external mask found and no mask binarizer given")
                mask = text_mask(image, binarizer=mask_binarizer)
            texture_cache[path] = inpaint_telea(image, mask, cfg.inpaint_radius)
        return texture_cache[path]

    rows = []
    for i, src_path in enumerate(sources):
        sub = derive_subseed(cfg.seed, i)
        rng = np.random.default_rng(sub)
        tex_path = papyri[int(rng.integers(len(papyri)))]
        ov_path = eligible[int(rng.integers(len(eligible)))]
        source = load_image(src_path)
        overlay = extract_fragment(load_image(ov_path), cfg.bg_threshold)
        result = compose_augmented(source, texture_for(tex_path), overlay, cfg)
        out_path = out_dir / f"{src_path.stem}.png"
        save_image(result, out_path)
        rows.append(
            {
                "index": i,
                "source": str(src_path),
                "texture_source": str(tex_path),
                "overlay_source": str(ov_path),
                "sub_seed": sub,
                "output": str(out_path),
            }
        )

    return {
        "seed": cfg.seed,
        "inpaint_radius": cfg.inpaint_radius,
        "texture_alpha": cfg.texture_alpha,
        "bg_threshold": cfg.bg_threshold,
        "outputs": rows,
    }
