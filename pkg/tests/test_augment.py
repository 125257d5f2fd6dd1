import numpy as np
import pytest

from papyrion.augment import (
    AugmentConfig,
    FragmentOverlay,
    augment_corpus,
    compose_augmented,
    derive_subseed,
    dilate8,
    extract_fragment,
    inpaint_telea,
    resize_bilinear,
    resize_nearest,
    text_mask,
)
from papyrion.binarize import binarize_otsu
from papyrion.corpus import file_checksum, fnv1a64
from papyrion.errors import ParameterError, PapyrionError
from papyrion.imgcore import BinaryImage, RasterImage, save_binary, save_image


def gray_img(px):
    return RasterImage(np.asarray(px, dtype=np.uint8))


# ---------------------------------------------------------------------------
# masks


def test_dilate8_center_pixel():
    m = np.zeros((5, 5), dtype=bool)
    m[2, 2] = True
    out = dilate8(m)
    expected = np.zeros((5, 5), dtype=bool)
    expected[1:4, 1:4] = True
    assert np.array_equal(out, expected)


def test_dilate8_corner_clips():
    m = np.zeros((4, 4), dtype=bool)
    m[0, 0] = True
    out = dilate8(m)
    expected = np.zeros((4, 4), dtype=bool)
    expected[:2, :2] = True
    assert np.array_equal(out, expected)


def test_dilate8_empty_stays_empty():
    assert not dilate8(np.zeros((6, 6), dtype=bool)).any()


def test_text_mask_requires_exactly_one_source(rng):
    img = gray_img(np.full((8, 8), 200))
    ext = BinaryImage(np.zeros((8, 8), dtype=bool))
    with pytest.raises(ParameterError):
        text_mask(img)
    with pytest.raises(ParameterError):
        text_mask(img, binarizer=binarize_otsu, external=ext)


def test_text_mask_external_size_checked():
    img = gray_img(np.full((8, 8), 200))
    with pytest.raises(PapyrionError):
        text_mask(img, external=BinaryImage(np.zeros((4, 4), dtype=bool)))


def test_text_mask_dilates_external():
    img = gray_img(np.full((5, 5), 200))
    ext = np.zeros((5, 5), dtype=bool)
    ext[2, 2] = True
    out = text_mask(img, external=BinaryImage(ext))
    assert np.array_equal(out.mask, dilate8(ext))


def test_text_mask_uses_binarizer():
    px = np.full((6, 6), 220, dtype=np.uint8)
    px[3, 3] = 10
    out = text_mask(gray_img(px), binarizer=binarize_otsu)
    assert np.array_equal(out.mask, dilate8(binarize_otsu(gray_img(px)).mask))


# ---------------------------------------------------------------------------
# inpainting


def test_inpaint_leaves_unmasked_pixels_untouched(rng):
    px = rng.integers(0, 256, size=(24, 24), dtype=np.uint8)
    m = np.zeros((24, 24), dtype=bool)
    m[8:12, 9:14] = True
    out = inpaint_telea(gray_img(px), BinaryImage(m), radius=4)
    assert np.array_equal(out.px[~m], px[~m])


def test_inpaint_empty_mask_is_identity(rng):
    px = rng.integers(0, 256, size=(12, 12), dtype=np.uint8)
    out = inpaint_telea(gray_img(px), BinaryImage(np.zeros((12, 12), dtype=bool)))
    assert np.array_equal(out.px, px)


def test_inpaint_single_hole_in_constant_region():
    px = np.full((15, 15), 137, dtype=np.uint8)
    px[7, 7] = 0
    m = np.zeros((15, 15), dtype=bool)
    m[7, 7] = True
    out = inpaint_telea(gray_img(px), BinaryImage(m), radius=3)
    assert out.px[7, 7] == 137


def test_inpaint_reconstructs_linear_ramp():
    x = np.arange(30, dtype=np.uint8) * 4
    px = np.tile(x, (30, 1))
    truth = px.copy()
    m = np.zeros((30, 30), dtype=bool)
    m[13:17, 14:18] = True
    px = px.copy()
    px[m] = 255
    out = inpaint_telea(gray_img(px), BinaryImage(m), radius=5)
    diff = np.abs(out.px[m].astype(int) - truth[m].astype(int))
    assert diff.max() <= 2


def test_inpaint_works_on_rgb(rng):
    px = rng.integers(0, 256, size=(14, 14, 3), dtype=np.uint8)
    m = np.zeros((14, 14), dtype=bool)
    m[6, 6] = True
    out = inpaint_telea(RasterImage(px), BinaryImage(m), radius=3)
    assert out.px.shape == (14, 14, 3)
    assert np.array_equal(out.px[~m], px[~m])


def test_inpaint_mask_touching_border(rng):
    """The sampling disk must clip at the image edge instead of wrapping."""
    px = rng.integers(0, 256, size=(12, 12), dtype=np.uint8)
    m = np.zeros((12, 12), dtype=bool)
    m[0, 0] = True
    m[11, 10:] = True
    m[0:3, 11] = True
    out = inpaint_telea(gray_img(px), BinaryImage(m), radius=5)
    assert np.array_equal(out.px[~m], px[~m])


def test_inpaint_rejects_bad_input(rng):
    px = rng.integers(0, 256, size=(8, 8), dtype=np.uint8)
    img = gray_img(px)
    with pytest.raises(ParameterError):
        inpaint_telea(img, BinaryImage(np.zeros((8, 8), dtype=bool)), radius=0)
    with pytest.raises(PapyrionError):
        inpaint_telea(img, BinaryImage(np.zeros((4, 4), dtype=bool)))
    with pytest.raises(PapyrionError, match="whole image"):
        inpaint_telea(img, BinaryImage(np.ones((8, 8), dtype=bool)))


# ---------------------------------------------------------------------------
# fragment extraction


def papyrus_photo():
    """Bright backdrop, dark fragment in the middle, bright speck inside it."""
    px = np.full((30, 30), 230, dtype=np.uint8)
    px[8:22, 8:22] = 100
    px[14, 14] = 240
    return gray_img(px)


def test_extract_fragment_alpha_layout():
    ov = extract_fragment(papyrus_photo(), bg_threshold=170)
    alpha = ov.alpha
    assert alpha[0, 0] == 255
    assert alpha[29, 29] == 255
    assert alpha[15, 15] == 0
    # bright speck inside the fragment is disconnected from the backdrop
    assert alpha[14, 14] == 0
    assert ov.image.px[:, :, :3].shape == (30, 30, 3)


def test_extract_fragment_keeps_pixel_values():
    ov = extract_fragment(papyrus_photo())
    assert ov.image.px[0, 0, 0] == 230
    assert ov.image.px[15, 15, 0] == 100


def test_extract_fragment_dark_border_rejected():
    px = np.full((20, 20), 60, dtype=np.uint8)
    px[8:12, 8:12] = 240
    with pytest.raises(PapyrionError, match="background too dark"):
        extract_fragment(gray_img(px))


def test_extract_fragment_threshold_validated():
    with pytest.raises(ParameterError):
        extract_fragment(papyrus_photo(), bg_threshold=300)


def test_fragment_overlay_validation():
    rgba = np.zeros((4, 4, 4), dtype=np.uint8)
    rgba[:, :, 3] = 255
    FragmentOverlay(RasterImage(rgba))
    with pytest.raises(ParameterError):
        FragmentOverlay(RasterImage(np.zeros((4, 4, 3), dtype=np.uint8)))
    bad = rgba.copy()
    bad[0, 0, 3] = 128
    with pytest.raises(ParameterError):
        FragmentOverlay(RasterImage(bad))


# ---------------------------------------------------------------------------
# resampling


def test_resize_bilinear_identity(rng):
    px = rng.integers(0, 256, size=(9, 7), dtype=np.uint8)
    out = resize_bilinear(px, 9, 7)
    assert np.array_equal(out, px)
    assert out is not px


def test_resize_bilinear_hand_case():
    px = np.array([[0, 10]], dtype=np.uint8)
    out = resize_bilinear(px, 1, 4)
    assert out.tolist() == [[0, 3, 8, 10]]


def test_resize_bilinear_rejects_bad_size(rng):
    with pytest.raises(ParameterError):
        resize_bilinear(np.zeros((4, 4), dtype=np.uint8), 0, 4)


def test_resize_nearest_hand_case():
    px = np.array([[1, 2], [3, 4]], dtype=np.uint8)
    out = resize_nearest(px, 4, 4)
    assert out.tolist() == [[1, 1, 2, 2], [1, 1, 2, 2], [3, 3, 4, 4], [3, 3, 4, 4]]


# ---------------------------------------------------------------------------
# composition


def full_overlay(h, w, opaque_mask, value=200):
    rgba = np.full((h, w, 4), value, dtype=np.uint8)
    rgba[:, :, 3] = np.where(opaque_mask, 255, 0).astype(np.uint8)
    return FragmentOverlay(RasterImage(rgba))


def test_compose_formula_on_random_pixels(rng):
    src = rng.integers(0, 256, size=(16, 16, 3), dtype=np.uint8)
    tex = rng.integers(0, 256, size=(16, 16, 3), dtype=np.uint8)
    opaque = np.zeros((16, 16), dtype=bool)
    opaque[:4, :] = True
    a = 0.7
    cfg = AugmentConfig(texture_alpha=a)
    out = compose_augmented(RasterImage(src), RasterImage(tex), full_overlay(16, 16, opaque), cfg)

    blend = np.floor(a * tex.astype(np.float64) + (1.0 - a) * src.astype(np.float64) + 0.5)
    blend = np.clip(blend, 0, 255).astype(np.uint8)
    assert np.array_equal(out.px[~opaque], blend[~opaque])
    assert (out.px[opaque] == 200).all()


def test_compose_alpha_extremes(rng):
    src = rng.integers(0, 256, size=(8, 8, 3), dtype=np.uint8)
    tex = rng.integers(0, 256, size=(8, 8, 3), dtype=np.uint8)
    none = np.zeros((8, 8), dtype=bool)
    ov = full_overlay(8, 8, none)
    out1 = compose_augmented(RasterImage(src), RasterImage(tex), ov, AugmentConfig(texture_alpha=1.0))
    assert np.array_equal(out1.px, tex)
    out0 = compose_augmented(RasterImage(src), RasterImage(tex), ov, AugmentConfig(texture_alpha=0.0))
    assert np.array_equal(out0.px, src)


def test_compose_rounds_half_away_from_zero():
    src = np.full((2, 2, 3), 2, dtype=np.uint8)
    tex = np.full((2, 2, 3), 3, dtype=np.uint8)
    ov = full_overlay(2, 2, np.zeros((2, 2), dtype=bool))
    out = compose_augmented(RasterImage(src), RasterImage(tex), ov, AugmentConfig(texture_alpha=0.5))
    assert (out.px == 3).all()


def test_compose_resizes_texture_and_overlay(rng):
    src = rng.integers(0, 256, size=(20, 18, 3), dtype=np.uint8)
    tex = rng.integers(0, 256, size=(9, 9, 3), dtype=np.uint8)
    ov = full_overlay(10, 10, np.ones((10, 10), dtype=bool), value=55)
    out = compose_augmented(RasterImage(src), RasterImage(tex), ov, AugmentConfig())
    assert out.px.shape == (20, 18, 3)
    assert (out.px == 55).all()


def test_augment_config_validation():
    with pytest.raises(ParameterError):
        AugmentConfig(inpaint_radius=0)
    with pytest.raises(ParameterError):
        AugmentConfig(texture_alpha=1.5)
    with pytest.raises(ParameterError):
        AugmentConfig(bg_threshold=-1)


def test_derive_subseed_is_fnv_of_seed_and_index():
    assert derive_subseed(7, 3) == fnv1a64(b"7:3")
    assert derive_subseed(7, 3) != derive_subseed(7, 4)
    assert derive_subseed(7, 3) != derive_subseed(8, 3)


# ---------------------------------------------------------------------------
# corpus driver


def build_corpus(tmp_path, rng, dark_papyrus=False):
    src_dir = tmp_path / "src"
    pap_dir = tmp_path / "pap"
    src_dir.mkdir()
    pap_dir.mkdir()
    sources = []
    for i in range(2):
        px = rng.integers(150, 256, size=(40, 40), dtype=np.uint8)
        px[10 + i : 14 + i, 5:30] = 40
        p = src_dir / f"page_{i}.png"
        save_image(gray_img(px), p)
        sources.append(p)
    papyri = []
    for i in range(2):
        px = np.full((36, 36), 215, dtype=np.uint8)
        px[8:28, 8:28] = 160  # fragment body
        px[12 + 2 * i, 10:26] = 70  # stroke of "text" to inpaint away
        if dark_papyrus and i == 1:
            px[0, :] = 40
            px[-1, :] = 40
            px[:, 0] = 40
            px[:, -1] = 40
        p = pap_dir / f"papyrus_{i}.png"
        save_image(gray_img(px), p)
        papyri.append(p)
    return sources, papyri


def test_augment_corpus_manifest_and_outputs(tmp_path, rng):
    sources, papyri = build_corpus(tmp_path, rng)
    out_dir = tmp_path / "out"
    cfg = AugmentConfig(seed=7, inpaint_radius=3)
    manifest = augment_corpus(sources, papyri, out_dir, cfg, mask_binarizer=binarize_otsu)
    assert manifest["seed"] == 7
    assert len(manifest["outputs"]) == 2
    for i, row in enumerate(manifest["outputs"]):
        assert row["index"] == i
        assert row["sub_seed"] == derive_subseed(7, i)
        assert (out_dir / f"page_{i}.png").exists()
        assert row["output"].endswith(f"page_{i}.png")


def test_augment_corpus_rerun_is_byte_identical(tmp_path, rng):
    sources, papyri = build_corpus(tmp_path, rng)
    cfg = AugmentConfig(seed=11, inpaint_radius=3)
    m1 = augment_corpus(sources, papyri, tmp_path / "a", cfg, mask_binarizer=binarize_otsu)
    m2 = augment_corpus(sources, papyri, tmp_path / "b", cfg, mask_binarizer=binarize_otsu)
    for r1, r2 in zip(m1["outputs"], m2["outputs"]):
        assert file_checksum(r1["output"]) == file_checksum(r2["output"])
        assert r1["sub_seed"] == r2["sub_seed"]
        assert r1["texture_source"] == r2["texture_source"]


def test_augment_corpus_uses_external_masks(tmp_path, rng):
    sources, papyri = build_corpus(tmp_path, rng)
    masks_dir = tmp_path / "masks"
    masks_dir.mkdir()
    for p in papyri:
        px = np.asarray(binarize_otsu(gray_img(np.asarray(__import__("PIL.Image", fromlist=["open"]).open(p)))).mask)
        save_binary(BinaryImage(px), masks_dir / f"{p.stem}.png")
    manifest = augment_corpus(
        sources, papyri, tmp_path / "out", AugmentConfig(seed=3, inpaint_radius=3),
        masks_dir=masks_dir,
    )
    assert len(manifest["outputs"]) == 2


def test_augment_corpus_requires_some_mask_source(tmp_path, rng):
    sources, papyri = build_corpus(tmp_path, rng)
    with pytest.raises(ParameterError, match="mask"):
        augment_corpus(sources, papyri, tmp_path / "out", AugmentConfig(inpaint_radius=3))


def test_augment_corpus_skips_dark_overlays(tmp_path, rng, caplog):
    sources, papyri = build_corpus(tmp_path, rng, dark_papyrus=True)
    import logging

    with caplog.at_level(logging.WARNING):
        manifest = augment_corpus(
            sources, papyri, tmp_path / "out", AugmentConfig(seed=5, inpaint_radius=3),
            mask_binarizer=binarize_otsu,
        )
    assert any("skipped" in r.message for r in caplog.records)
    for row in manifest["outputs"]:
        assert row["overlay_source"].endswith("papyrus_0.png")


def test_augment_corpus_rejects_empty_inputs(tmp_path, rng):
    sources, papyri = build_corpus(tmp_path, rng)
    with pytest.raises(PapyrionError):
        augment_corpus([], papyri, tmp_path / "out", AugmentConfig())
    with pytest.raises(PapyrionError):
        augment_corpus(sources, [], tmp_path / "out", AugmentConfig())


def test_augment_corpus_all_dark_rejected(tmp_path, rng):
    sources, _ = build_corpus(tmp_path, rng)
    pap = tmp_path / "darkpap"
    pap.mkdir()
    px = np.full((20, 20), 50, dtype=np.uint8)
    p = pap / "dark.png"
    save_image(gray_img(px), p)
    with pytest.raises(PapyrionError, match="brightness"):
        augment_corpus(sources, [p], tmp_path / "out", AugmentConfig(), mask_binarizer=binarize_otsu)
