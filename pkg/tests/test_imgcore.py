import numpy as np
import pytest

from papyrion.errors import PapyrionError, ParameterError
from papyrion.imgcore import (
    BinaryImage,
    IntegralImage,
    RasterImage,
    cumulative_table,
    integral_build,
    load_binary,
    load_image,
    save_binary,
    save_image,
    skeletonize,
    to_grayscale,
    to_rgb,
    window_counts,
    windowed_sum,
)

# ---------------------------------------------------------------------------
# oracles


def naive_windowed_sum(arr, window):
    h, w = arr.shape
    r = window // 2
    out = np.zeros((h, w), dtype=np.int64)
    for y in range(h):
        for x in range(w):
            y0, y1 = max(0, y - r), min(h, y + r + 1)
            x0, x1 = max(0, x - r), min(w, x + r + 1)
            out[y, x] = int(arr[y0:y1, x0:x1].sum())
    return out


def naive_skeleton(mask):
    """Direct per-pixel transliteration of the two-subiteration thinning
    pass, kept deliberately loop-based and slow. Outside the image counts
    as background, so the original pixels sit at 1..h, 1..w of a padded
    array."""
    h, w = mask.shape
    img = np.zeros((h + 2, w + 2), dtype=np.uint8)
    img[1:-1, 1:-1] = mask

    def neighbors(y, x):
        # P2..P9 clockwise from north
        return [
            img[y - 1, x], img[y - 1, x + 1], img[y, x + 1], img[y + 1, x + 1],
            img[y + 1, x], img[y + 1, x - 1], img[y, x - 1], img[y - 1, x - 1],
        ]

    changed = True
    while changed:
        changed = False
        for step in (0, 1):
            to_clear = []
            for y in range(1, h + 1):
                for x in range(1, w + 1):
                    if not img[y, x]:
                        continue
                    p = neighbors(y, x)
                    b = sum(p)
                    if not (2 <= b <= 6):
                        continue
                    a = sum(1 for i in range(8) if p[i] == 0 and p[(i + 1) % 8] == 1)
                    if a != 1:
                        continue
                    if step == 0:
                        if p[0] * p[2] * p[4] != 0 or p[2] * p[4] * p[6] != 0:
                            continue
                    else:
                        if p[0] * p[2] * p[6] != 0 or p[0] * p[4] * p[6] != 0:
                            continue
                    to_clear.append((y, x))
            if to_clear:
                changed = True
                for y, x in to_clear:
                    img[y, x] = 0
    return img[1:-1, 1:-1].astype(bool)


# ---------------------------------------------------------------------------
# containers


def test_raster_rejects_bad_dtype():
    with pytest.raises(ParameterError):
        RasterImage(np.zeros((4, 4), dtype=np.float32))


def test_raster_rejects_bad_channel_count():
    with pytest.raises(ParameterError):
        RasterImage(np.zeros((4, 4, 2), dtype=np.uint8))


def test_raster_squeezes_single_channel():
    img = RasterImage(np.zeros((4, 5, 1), dtype=np.uint8))
    assert img.px.shape == (4, 5)
    assert img.channels == 1


def test_raster_is_read_only():
    img = RasterImage(np.zeros((4, 4), dtype=np.uint8))
    with pytest.raises(ValueError):
        img.px[0, 0] = 1


def test_binary_validation_and_count():
    b = BinaryImage(np.eye(5, dtype=bool))
    assert b.ink_count() == 5
    with pytest.raises(ParameterError):
        BinaryImage(np.eye(5, dtype=np.uint8))
    with pytest.raises(ParameterError):
        BinaryImage(np.zeros((2, 2, 2), dtype=bool))


# ---------------------------------------------------------------------------
# color conversion


def test_to_grayscale_known_values():
    px = np.array([[[255, 0, 0], [0, 255, 0], [0, 0, 255], [255, 255, 255]]], dtype=np.uint8)
    g = to_grayscale(RasterImage(px))
    # round(76.245), round(149.685), round(29.07), 255
    assert g.px.tolist() == [[76, 150, 29, 255]]


def test_to_grayscale_matches_naive(rng):
    px = rng.integers(0, 256, (13, 9, 3), dtype=np.uint8)
    g = to_grayscale(RasterImage(px))
    for y in range(13):
        for x in range(9):
            r, gg, b = (float(v) for v in px[y, x])
            expect = int(np.floor(0.299 * r + 0.587 * gg + 0.114 * b + 0.5))
            assert g.px[y, x] == expect


def test_to_grayscale_ignores_alpha(rng):
    rgb = rng.integers(0, 256, (6, 6, 3), dtype=np.uint8)
    rgba = np.dstack([rgb, rng.integers(0, 256, (6, 6), dtype=np.uint8)])
    assert np.array_equal(
        to_grayscale(RasterImage(rgb)).px, to_grayscale(RasterImage(rgba)).px
    )


def test_to_grayscale_passthrough():
    img = RasterImage(np.arange(16, dtype=np.uint8).reshape(4, 4))
    assert to_grayscale(img) is img


def test_to_rgb_roundtrips():
    g = RasterImage(np.full((3, 3), 7, dtype=np.uint8))
    rgb = to_rgb(g)
    assert rgb.channels == 3
    assert (rgb.px == 7).all()
    rgba = RasterImage(np.zeros((3, 3, 4), dtype=np.uint8))
    assert to_rgb(rgba).channels == 3


# ---------------------------------------------------------------------------
# integral tables


def test_cumulative_table_small():
    arr = np.array([[1, 2], [3, 4]], dtype=np.int64)
    tab = cumulative_table(arr)
    assert tab.tolist() == [[0, 0, 0], [0, 1, 3], [0, 4, 10]]


def test_windowed_sum_matches_naive(rng):
    arr = rng.integers(0, 255, (20, 17), dtype=np.int64)
    for window in (3, 5, 9, 21):
        got = windowed_sum(cumulative_table(arr), window)
        assert np.array_equal(got, naive_windowed_sum(arr, window)), window


def test_window_counts_matches_naive():
    ones = np.ones((12, 8), dtype=np.int64)
    for window in (3, 7):
        assert np.array_equal(
            window_counts(12, 8, window), naive_windowed_sum(ones, window)
        )


def test_integral_rect_sums(rng):
    px = rng.integers(0, 256, (11, 14), dtype=np.uint8)
    ii = integral_build(RasterImage(px))
    for x0, y0, x1, y1 in [(0, 0, 14, 11), (3, 2, 7, 9), (5, 5, 6, 6)]:
        block = px[y0:y1, x0:x1].astype(np.int64)
        assert ii.rect_sum(x0, y0, x1, y1) == int(block.sum())
        assert ii.rect_sqsum(x0, y0, x1, y1) == int((block * block).sum())


def test_integral_rect_validation(rng):
    ii = integral_build(RasterImage(rng.integers(0, 256, (5, 5), dtype=np.uint8)))
    with pytest.raises(ParameterError):
        ii.rect_sum(3, 0, 2, 5)
    with pytest.raises(ParameterError):
        ii.rect_sum(0, 0, 6, 5)


def test_integral_requires_grayscale(rng):
    rgb = RasterImage(rng.integers(0, 256, (4, 4, 3), dtype=np.uint8))
    with pytest.raises(ParameterError):
        integral_build(rgb)


# ---------------------------------------------------------------------------
# thinning


def test_skeletonize_matches_naive(rng):
    for density in (0.25, 0.5, 0.75):
        mask = rng.random((12, 15)) < density
        got = skeletonize(BinaryImage(mask))
        assert np.array_equal(got.mask, naive_skeleton(mask)), density


def test_skeletonize_is_idempotent_and_subset(rng):
    mask = rng.random((30, 30)) < 0.45
    once = skeletonize(BinaryImage(mask))
    twice = skeletonize(once)
    assert np.array_equal(once.mask, twice.mask)
    assert not (once.mask & ~mask).any()


def test_skeletonize_keeps_thin_strokes():
    line = np.zeros((7, 9), dtype=bool)
    line[3, 1:8] = True
    assert np.array_equal(skeletonize(BinaryImage(line)).mask, line)
    dot = np.zeros((5, 5), dtype=bool)
    dot[2, 2] = True
    assert np.array_equal(skeletonize(BinaryImage(dot)).mask, dot)


def test_skeletonize_thins_a_bar():
    bar = np.zeros((9, 20), dtype=bool)
    bar[3:6, 2:18] = True
    thin = skeletonize(BinaryImage(bar))
    assert 0 < thin.ink_count() < bar.sum()
    assert not (thin.mask & ~bar).any()


# ---------------------------------------------------------------------------
# file IO


@pytest.mark.parametrize("suffix", [".png", ".pgm"])
def test_gray_roundtrip(tmp_path, rng, suffix):
    px = rng.integers(0, 256, (9, 7), dtype=np.uint8)
    p = tmp_path / f"img{suffix}"
    save_image(RasterImage(px), p)
    assert np.array_equal(load_image(p).px, px)


@pytest.mark.parametrize("suffix", [".png", ".ppm"])
def test_rgb_roundtrip(tmp_path, rng, suffix):
    px = rng.integers(0, 256, (9, 7, 3), dtype=np.uint8)
    p = tmp_path / f"img{suffix}"
    save_image(RasterImage(px), p)
    assert np.array_equal(load_image(p).px, px)


def test_rgba_roundtrip_png(tmp_path, rng):
    px = rng.integers(0, 256, (5, 5, 4), dtype=np.uint8)
    p = tmp_path / "img.png"
    save_image(RasterImage(px), p)
    assert np.array_equal(load_image(p).px, px)


def test_save_rejects_unknown_suffix(tmp_path):
    with pytest.raises(PapyrionError):
        save_image(RasterImage(np.zeros((2, 2), dtype=np.uint8)), tmp_path / "x.tiff")


def test_save_rejects_channel_mismatch(tmp_path, rng):
    rgb = RasterImage(rng.integers(0, 256, (4, 4, 3), dtype=np.uint8))
    with pytest.raises(PapyrionError):
        save_image(rgb, tmp_path / "x.pgm")


def test_load_image_errors(tmp_path):
    with pytest.raises(PapyrionError):
        load_image(tmp_path / "absent.png")
    bad = tmp_path / "not_an_image.png"
    bad.write_text("hello")
    with pytest.raises(PapyrionError):
        load_image(bad)


def test_binary_io_threshold_and_polarity(tmp_path):
    px = np.array([[0, 127, 128, 255]], dtype=np.uint8)
    p = tmp_path / "b.png"
    save_image(RasterImage(px), p)
    b = load_binary(p)
    assert b.mask.tolist() == [[True, True, False, False]]

    out = tmp_path / "saved.png"
    save_binary(b, out)
    assert load_image(out).px.tolist() == [[0, 0, 255, 255]]


def test_binary_roundtrip(tmp_path, rng):
    mask = rng.random((12, 10)) < 0.4
    p = tmp_path / "m.png"
    save_binary(BinaryImage(mask), p)
    assert np.array_equal(load_binary(p).mask, mask)
