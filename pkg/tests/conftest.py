import numpy as np
import pytest

from papyrion.imgcore import BinaryImage, RasterImage, save_binary, save_image


@pytest.fixture
def rng():
    return np.random.default_rng(20240817)


def make_page(rng, size=160, bg=228, strokes=24, writer_salt=0):
    """A synthetic page: dark stroke rectangles on a light ground plus mild
    noise. writer_salt shifts stroke geometry so pages from one "writer"
    resemble each other more than pages across writers."""
    local = np.random.default_rng(rng.integers(2**63) + writer_salt)
    page = np.full((size, size), bg, dtype=np.float64)
    for _ in range(strokes):
        y, x = local.integers(12, size - 24, 2)
        hh = int(local.integers(2, 5 + writer_salt % 3))
        ww = int(local.integers(5, 16))
        page[y : y + hh, x : x + ww] = local.integers(15, 70)
    page += local.normal(0.0, 5.0, page.shape)
    return RasterImage(np.clip(np.floor(page + 0.5), 0, 255).astype(np.uint8))


def write_pair_corpus(rng, gray_dir, gt_dir, names, size=160):
    """Grayscale pages plus their threshold-120 ground truths on disk."""
    gray_dir.mkdir(parents=True, exist_ok=True)
    gt_dir.mkdir(parents=True, exist_ok=True)
    for i, name in enumerate(names):
        page = make_page(rng, size=size, writer_salt=i % 3)
        save_image(page, gray_dir / f"{name}.png")
        save_binary(BinaryImage(page.px < 120), gt_dir / f"{name}.png")


def random_binary(rng, h, w, density=0.3):
    return BinaryImage(rng.random((h, w)) < density)
