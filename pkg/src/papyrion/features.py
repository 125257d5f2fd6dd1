"""Patch features for writer analysis: keypoints, descriptors, k-means, VLAD.

The chain is: difference-of-Gaussians keypoints on a grayscale rendering,
32x32 patches cut from the binarized page at those keypoints, a gradient
orientation-histogram descriptor per patch (square-rooted, so dot products
behave like the Hellinger kernel), a k-means codebook over many pages, and
one VLAD vector per page.

Everything is deterministic: detector output is sorted row-major, k-means is
seeded, and VLAD accumulates residuals in a content-sorted order so the
encoding does not depend on descriptor ordering at all.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from papyrion.errors import PapyrionError, ParameterError
from papyrion.imgcore import BinaryImage, RasterImage

__all__ = [
    "PATCH_SIZE",
    "Keypoint",
    "DescriptorSet",
    "Codebook",
    "VladVector",
    "detect_keypoints",
    "extract_patches",
    "compute_descriptors",
    "kmeans_fit",
    "assign_clusters",
    "vlad_aggregate",
    "vlad_encode",
    "write_pdsc",
    "read_pdsc",
    "save_codebook",
    "load_codebook",
]

PATCH_SIZE = 32
_HALF = PATCH_SIZE // 2
DESCRIPTOR_DIM = 128

# Detector constants.
_OCTAVES = 3
_BASE_SIGMA = 1.6
_SCALE_STEP = 2.0 ** 0.5
_CONTRAST_THRESHOLD = 0.04
_EDGE_RATIO = 10.0


@dataclass(frozen=True)
class Keypoint:
    x: int
    y: int


@dataclass(frozen=True)
class DescriptorSet:
    """Descriptors for one image: (n, 128) float64 rows plus the keypoint
    each row was extracted at."""

    values: np.ndarray
    keypoints: tuple[Keypoint, ...]
    image_id: str = ""

    def __post_init__(self) -> None:
        v = np.ascontiguousarray(np.asarray(self.values, dtype=np.float64))
        if v.ndim != 2:
            v = v.reshape(0, DESCRIPTOR_DIM) if v.size == 0 else v
        if v.ndim != 2:
            raise ParameterError(f"descriptor array must be 2-D, got shape {v.shape}")
        if not np.isfinite(v).all():
            raise ParameterError("descriptors must be finite")
        if len(self.keypoints) != v.shape[0]:
            raise ParameterError(
                f"{v.shape[0]} descriptors but {len(self.keypoints)} keypoints"
            )
        v.setflags(write=False)
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "keypoints", tuple(self.keypoints))

    @property
    def count(self) -> int:
        return self.values.shape[0]

    @property
    def dim(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True)
class Codebook:
    centroids: np.ndarray
    seed: int
    inertia: float
    inertia_history: tuple[float, ...] = field(default_factory=tuple)

    def __post_init__(self) -> None:
        c = np.ascontiguousarray(np.asarray(self.centroids, dtype=np.float64))
        if c.ndim != 2 or c.shape[0] < 1:
            raise ParameterError(f"centroid array must be (k, d), got shape {c.shape}")
        if not np.isfinite(c).all():
            raise ParameterError("centroids must be finite")
        c.setflags(write=False)
        object.__setattr__(self, "centroids", c)
        object.__setattr__(self, "inertia_history", tuple(self.inertia_history))

    @property
    def k(self) -> int:
        return self.centroids.shape[0]

    @property
    def dim(self) -> int:
        return self.centroids.shape[1]


@dataclass(frozen=True)
class VladVector:
    values: np.ndarray
    image_id: str = ""
    degenerate: bool = False

    def __post_init__(self) -> None:
        v = np.ascontiguousarray(np.asarray(self.values, dtype=np.float64))
        if v.ndim != 1:
            raise ParameterError("VLAD vector must be 1-D")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)


# ---------------------------------------------------------------------------
# keypoint detection


def detect_keypoints(gray: RasterImage) -> list[Keypoint]:
    """Difference-of-Gaussians extrema over 3 octaves.

    Each octave builds 5 Gaussian levels (base 1.6, step sqrt2) and scans
    the two interior DoG levels for 3x3x3 scale-space extrema. An extremum
    survives if |response| exceeds 0.04 on the [0, 1]-normalized image and
    the 2x2 Hessian edge test with ratio 10 passes. Coordinates map back to
    full resolution; duplicates collapse; the result is sorted row-major
    (y, then x). Images smaller than one patch yield an empty list.
    """
    if gray.channels != 1:
        raise ParameterError("keypoint detection expects a grayscale image")
    h, w = gray.height, gray.width
    if h < PATCH_SIZE or w < PATCH_SIZE:
        return []

    img = gray.px.astype(np.float64) / 255.0
    found: set[tuple[int, int]] = set()
    edge_limit = (_EDGE_RATIO + 1.0) ** 2 / _EDGE_RATIO

    for octave in range(_OCTAVES):
        oh, ow = img.shape
        if oh < 8 or ow < 8:
            break
        sigmas = [_BASE_SIGMA * _SCALE_STEP ** i for i in range(5)]
        gauss = [ndimage.gaussian_filter(img, s, mode="nearest") for s in sigmas]
        dogs = np.stack([gauss[i + 1] - gauss[i] for i in range(4)])
        scale = 1 << octave

        for zi in (1, 2):
            mid = dogs[zi]
            center = mid[1:-1, 1:-1]
            ch, cw = center.shape

            # Plateau-tolerant extremum test: no neighbor beats the center
            # and at least one falls strictly below (above). Exact ties
            # happen on synthetic symmetric shapes, where a strict test
            # would drop the peak entirely; plateau interiors (all 26
            # neighbors equal) still fail.
            ge_all = np.ones((ch, cw), dtype=bool)
            le_all = np.ones((ch, cw), dtype=bool)
            gt_any = np.zeros((ch, cw), dtype=bool)
            lt_any = np.zeros((ch, cw), dtype=bool)
            for dz in range(zi - 1, zi + 2):
                for dy in range(3):
                    for dx in range(3):
                        if (dz, dy, dx) == (zi, 1, 1):
                            continue
                        nb = dogs[dz, dy : dy + ch, dx : dx + cw]
                        ge_all &= center >= nb
                        le_all &= center <= nb
                        gt_any |= center > nb
                        lt_any |= center < nb
            cand = ((ge_all & gt_any) | (le_all & lt_any)) & (
                np.abs(center) > _CONTRAST_THRESHOLD
            )

            # 2x2 Hessian edge rejection on the same DoG level.
            dxx = mid[1:-1, 2:] + mid[1:-1, :-2] - 2.0 * center
            dyy = mid[2:, 1:-1] + mid[:-2, 1:-1] - 2.0 * center
            dxy = (mid[2:, 2:] - mid[2:, :-2] - mid[:-2, 2:] + mid[:-2, :-2]) / 4.0
            tr = dxx + dyy
            det = dxx * dyy - dxy * dxy
            with np.errstate(divide="ignore", invalid="ignore"):
                keep = (det > 0) & (tr * tr / det < edge_limit)
            cand &= keep

            ys, xs = np.nonzero(cand)
            for y, x in zip((ys + 1).tolist(), (xs + 1).tolist()):
                found.add((x * scale, y * scale))

        img = gauss[2][::2, ::2]

    kps = [Keypoint(x, y) for (x, y) in found if 0 <= x < w and 0 <= y < h]
    kps.sort(key=lambda kp: (kp.y, kp.x))
    return kps


# ---------------------------------------------------------------------------
# patches and descriptors


def extract_patches(
    gray: RasterImage,
    binary: BinaryImage,
    keypoints: list[Keypoint],
    min_fg: float = 0.05,
) -> tuple[np.ndarray, list[Keypoint]]:
    """Cut 32x32 patches from the binarized image around each keypoint.

    A keypoint survives iff its window [x-16, x+15] x [y-16, y+15] lies
    fully inside the image and the patch's ink fraction is >= ``min_fg``.
    Returns (patches as (n, 32, 32) uint8 in {0, 1}, surviving keypoints).
    """
    if not (0.0 <= min_fg <= 1.0):
        raise ParameterError(f"min_fg must lie in [0, 1], got {min_fg}")
    if (gray.height, gray.width) != (binary.height, binary.width):
        raise PapyrionError("grayscale and binary image sizes differ")
    bm = binary.mask.astype(np.uint8)
    h, w = bm.shape
    patches = []
    kept = []
    for kp in keypoints:
        x0, y0 = kp.x - _HALF, kp.y - _HALF
        if x0 < 0 or y0 < 0 or x0 + PATCH_SIZE > w or y0 + PATCH_SIZE > h:
            continue
        patch = bm[y0 : y0 + PATCH_SIZE, x0 : x0 + PATCH_SIZE]
        if float(patch.mean()) >= min_fg:
            patches.append(patch)
            kept.append(kp)
    if not patches:
        return np.zeros((0, PATCH_SIZE, PATCH_SIZE), dtype=np.uint8), []
    return np.stack(patches), kept


_DESC_SIGMA = 8.0
_N_CELLS = 4
_N_BINS = 8


def _descriptor_weights() -> np.ndarray:
    c = (PATCH_SIZE - 1) / 2.0
    ys, xs = np.mgrid[0:PATCH_SIZE, 0:PATCH_SIZE].astype(np.float64)
    return np.exp(-((xs - c) ** 2 + (ys - c) ** 2) / (2.0 * _DESC_SIGMA ** 2))


_DESC_W = _descriptor_weights()
_CELL_PX = PATCH_SIZE // _N_CELLS


def _octant_bins(gx: np.ndarray, gy: np.ndarray) -> np.ndarray:
    """Orientation bin floor(8 * theta / 2pi) computed by sign and magnitude
    comparisons only. Bin k covers [k pi/4, (k+1) pi/4), boundaries included
    on the left, so negating a gradient always lands exactly 4 bins away.
    Zero gradients map to bin 0 (their weight is zero anyway)."""
    ax = np.abs(gx)
    ay = np.abs(gy)
    conds = [
        (gx > 0) & (gy >= 0) & (ay < ax),
        (gy > 0) & (gx > 0) & (ay >= ax),
        (gy > 0) & (gx <= 0) & (ax < ay),
        (gx < 0) & (gy > 0) & (ax >= ay),
        (gx < 0) & (gy <= 0) & (ay < ax),
        (gy < 0) & (gx < 0) & (ay >= ax),
        (gy < 0) & (gx >= 0) & (ax < ay),
        (gx > 0) & (gy < 0) & (ax >= ay),
    ]
    return np.select(conds, list(range(_N_BINS)), default=0).astype(np.int64)


def _patch_descriptor(patch: np.ndarray) -> np.ndarray:
    """128-d orientation histogram of one 32x32 patch.

    Central-difference gradients, Gaussian spatial weighting (sigma 8), 4x4
    spatial cells times 8 orientation bins, then: L2 normalize, clamp at
    0.2, renormalize, L1 normalize, element-wise square root. The square
    root step gives the vector unit L2 norm; a gradient-free patch stays the
    zero vector.
    """
    p = patch.astype(np.float64)
    gy, gx = np.gradient(p)
    mag = np.hypot(gx, gy)
    bins = _octant_bins(gx, gy)

    cy = np.arange(PATCH_SIZE) // _CELL_PX
    cell_y = cy[:, None]
    cell_x = cy[None, :]
    idx = (cell_y * _N_CELLS + cell_x) * _N_BINS + bins
    hist = np.bincount(idx.ravel(), weights=(mag * _DESC_W).ravel(), minlength=DESCRIPTOR_DIM)

    norm = float(np.sqrt((hist * hist).sum()))
    if norm == 0.0:
        return np.zeros(DESCRIPTOR_DIM, dtype=np.float64)
    v = hist / norm
    v = np.minimum(v, 0.2)
    v = v / float(np.sqrt((v * v).sum()))
    v = v / float(v.sum())
    return np.sqrt(v)


def compute_descriptors(
    patches: np.ndarray,
    keypoints: list[Keypoint] | None = None,
    image_id: str = "",
) -> DescriptorSet:
    """Descriptor per patch; ``keypoints`` defaults to per-patch placeholders
    at the patch index when the caller did not keep them."""
    patches = np.asarray(patches)
    if patches.ndim != 3 or patches.shape[1:] != (PATCH_SIZE, PATCH_SIZE):
        raise ParameterError(f"patches must be (n, 32, 32), got {patches.shape}")
    n = patches.shape[0]
    if keypoints is None:
        keypoints = [Keypoint(i, 0) for i in range(n)]
    values = np.zeros((n, DESCRIPTOR_DIM), dtype=np.float64)
    for i in range(n):
        values[i] = _patch_descriptor(patches[i])
    return DescriptorSet(values=values, keypoints=tuple(keypoints), image_id=image_id)


# ---------------------------------------------------------------------------
# k-means


def _as_matrix(data) -> np.ndarray:
    if isinstance(data, DescriptorSet):
        return np.asarray(data.values, dtype=np.float64)
    if isinstance(data, (list, tuple)) and data and isinstance(data[0], DescriptorSet):
        return np.concatenate([np.asarray(d.values, dtype=np.float64) for d in data], axis=0)
    m = np.asarray(data, dtype=np.float64)
    if m.ndim != 2:
        raise ParameterError(f"data must be a 2-D matrix, got shape {m.shape}")
    return m


def _sq_dists(x: np.ndarray, c: np.ndarray) -> np.ndarray:
    d = (
        (x * x).sum(axis=1)[:, None]
        - 2.0 * (x @ c.T)
        + (c * c).sum(axis=1)[None, :]
    )
    return np.maximum(d, 0.0)


def kmeans_fit(data, k: int, seed: int = 0, max_iter: int = 100, tol: float = 1e-4) -> Codebook:
    """Lloyd k-means with k-means++ seeding.

    Deterministic for a given (data order, k, seed). Iterations stop when
    the largest centroid shift drops below ``tol`` or after ``max_iter``
    rounds. A cluster that loses all members is reseeded to the point
    currently farthest from its own centroid. The recorded inertia history
    (one entry per assignment step, including the final one) never
    increases.
    """
    x = _as_matrix(data)
    n, dim = x.shape
    if k < 1:
        raise ParameterError(f"k must be >= 1, got {k}")
    if n < k:
        raise PapyrionError(f"k-means needs at least k={k} points, got {n}")

    rng = np.random.default_rng(seed)
    chosen = [int(rng.integers(n))]
    d2 = _sq_dists(x, x[chosen[-1]][None, :])[:, 0]
    while len(chosen) < k:
        total = float(d2.sum())
        if total <= 0.0:
            for i in range(n):
                if i not in chosen:
                    chosen.append(i)
                    break
        else:
            pick = int(rng.choice(n, p=d2 / total))
            chosen.append(pick)
        d2 = np.minimum(d2, _sq_dists(x, x[chosen[-1]][None, :])[:, 0])

    centroids = x[chosen].copy()
    history: list[float] = []
    for _ in range(max_iter):
        dists = _sq_dists(x, centroids)
        labels = np.argmin(dists, axis=1)
        mind = dists[np.arange(n), labels]
        history.append(float(mind.sum()))

        new_centroids = centroids.copy()
        counts = np.bincount(labels, minlength=k)
        sums = np.zeros((k, dim), dtype=np.float64)
        np.add.at(sums, labels, x)
        nonempty = counts > 0
        new_centroids[nonempty] = sums[nonempty] / counts[nonempty][:, None]

        taken = mind.copy()
        for j in np.nonzero(~nonempty)[0]:
            far = int(np.argmax(taken))
            new_centroids[j] = x[far]
            taken[far] = -1.0

        shift = float(np.sqrt(((new_centroids - centroids) ** 2).sum(axis=1)).max())
        centroids = new_centroids
        if shift < tol:
            break

    dists = _sq_dists(x, centroids)
    final = float(dists[np.arange(n), np.argmin(dists, axis=1)].sum())
    history.append(final)
    return Codebook(centroids=centroids, seed=seed, inertia=final, inertia_history=tuple(history))


def assign_clusters(data, codebook: Codebook) -> np.ndarray:
    """Nearest-centroid index per row; ties go to the lowest index.

    Distances are the directly summed squared differences (computed in
    chunks), so the result matches a per-point evaluation exactly.
    """
    x = _as_matrix(data)
    if x.shape[0] == 0:
        return np.zeros(0, dtype=np.int64)
    c = codebook.centroids
    if x.shape[1] != codebook.dim:
        raise PapyrionError(
            f"descriptor dimension {x.shape[1]} does not match codebook dimension {codebook.dim}"
        )
    out = np.empty(x.shape[0], dtype=np.int64)
    step = max(1, (1 << 24) // (c.shape[0] * c.shape[1]))
    for i in range(0, x.shape[0], step):
        chunk = x[i : i + step]
        d = ((chunk[:, None, :] - c[None, :, :]) ** 2).sum(axis=2)
        out[i : i + chunk.shape[0]] = np.argmin(d, axis=1)
    return out


# ---------------------------------------------------------------------------
# VLAD


def vlad_aggregate(desc: DescriptorSet, codebook: Codebook) -> np.ndarray:
    """Raw VLAD matrix: per cluster, the sum of residuals of its members.

    Each coordinate is summed with math.fsum, whose result is the exactly
    rounded value of the true sum. That makes the aggregate bit-identical
    under any permutation of the input descriptors, and doubles exactly when
    the descriptor set is duplicated.
    """
    v = np.zeros((codebook.k, codebook.dim), dtype=np.float64)
    if desc.count == 0:
        return v
    x = np.asarray(desc.values, dtype=np.float64)
    labels = assign_clusters(x, codebook)
    for j in np.unique(labels):
        res = x[labels == j] - codebook.centroids[j]
        v[j] = [math.fsum(col) for col in res.T.tolist()]
    return v


def vlad_encode(desc: DescriptorSet, codebook: Codebook, intra_norm: bool = False) -> VladVector:
    """Power-normalized, L2-normalized VLAD encoding of one image.

    With ``intra_norm`` each cluster block is L2-normalized after the power
    step and before the global norm. An image with no descriptors, or whose
    residuals cancel exactly, encodes to the zero vector and is flagged
    degenerate.
    """
    v = vlad_aggregate(desc, codebook)
    z = np.sign(v) * np.sqrt(np.abs(v))
    if intra_norm:
        norms = np.sqrt((z * z).sum(axis=1))
        nz = norms > 0.0
        z[nz] = z[nz] / norms[nz][:, None]
    flat = z.ravel()
    norm = float(np.sqrt((flat * flat).sum()))
    if norm == 0.0:
        return VladVector(values=np.zeros(flat.size), image_id=desc.image_id, degenerate=True)
    return VladVector(values=flat / norm, image_id=desc.image_id, degenerate=False)


# ---------------------------------------------------------------------------
# descriptor file format

_PDSC_MAGIC = b"PDSC"
_PDSC_VERSION = 1


def write_pdsc(path: str | Path, desc: DescriptorSet) -> None:
    """Serialize a DescriptorSet.

    Layout (little endian): magic "PDSC", u32 version = 1, u32 n, u32 d,
    n*d float32 descriptor values, then n pairs of u32 (x, y) keypoint
    coordinates.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    n, d = desc.values.shape
    for kp in desc.keypoints:
        if kp.x < 0 or kp.y < 0:
            raise ParameterError("keypoint coordinates must be non-negative for serialization")
    with open(path, "wb") as fh:
        fh.write(_PDSC_MAGIC)
        fh.write(struct.pack("<III", _PDSC_VERSION, n, d))
        fh.write(np.asarray(desc.values, dtype="<f4").tobytes())
        coords = np.array([(kp.x, kp.y) for kp in desc.keypoints], dtype="<u4")
        fh.write(coords.tobytes())


def read_pdsc(path: str | Path) -> DescriptorSet:
    """Read a descriptor file written by write_pdsc (or a compatible
    producer). The image id is the file stem."""
    path = Path(path)
    try:
        blob = path.read_bytes()
    except FileNotFoundError:
        raise PapyrionError(f"no such descriptor file: {path}") from None
    if len(blob) < 16:
        raise PapyrionError(f"descriptor file too short: {path.name}")
    if blob[:4] != _PDSC_MAGIC:
        raise PapyrionError(f"bad magic in descriptor file: {path.name}")
    version, n, d = struct.unpack("<III", blob[4:16])
    if version != _PDSC_VERSION:
        raise PapyrionError(f"unsupported descriptor file version {version} in {path.name}")
    need = 16 + n * d * 4 + n * 8
    if len(blob) != need:
        raise PapyrionError(
            f"truncated descriptor file {path.name}: expected {need} bytes, got {len(blob)}"
        )
    values = np.frombuffer(blob, dtype="<f4", count=n * d, offset=16).astype(np.float64)
    values = values.reshape(n, d)
    coords = np.frombuffer(blob, dtype="<u4", count=n * 2, offset=16 + n * d * 4)
    kps = tuple(Keypoint(int(coords[2 * i]), int(coords[2 * i + 1])) for i in range(n))
    return DescriptorSet(values=values, keypoints=kps, image_id=path.stem)


def save_codebook(path: str | Path, codebook: Codebook) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        np.savez(
            fh,
            centroids=codebook.centroids,
            seed=np.int64(codebook.seed),
            inertia=np.float64(codebook.inertia),
            inertia_history=np.asarray(codebook.inertia_history, dtype=np.float64),
        )


def load_codebook(path: str | Path) -> Codebook:
    path = Path(path)
    try:
        with np.load(path) as z:
            return Codebook(
                centroids=z["centroids"],
                seed=int(z["seed"]),
                inertia=float(z["inertia"]),
                inertia_history=tuple(float(v) for v in z["inertia_history"]),
            )
    except FileNotFoundError:
        raise PapyrionError(f"no such codebook file: {path}") from None
    except (KeyError, ValueError, OSError) as e:
        raise PapyrionError(f"not a readable codebook file: {path} ({e})") from None
