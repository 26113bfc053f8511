import numpy as np
import pytest
from hypothesis import assume, given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from bpmri_lesion.errors import InvalidArgumentError
from bpmri_lesion.masks import BinaryMask2D, VolumeGeometry, dice2d
from bpmri_lesion.preprocess import (
    CropBox, PatchTransform, crop_box_for, crop_patch, hist_equalize, mask_to_original, mask_to_patch,
    preprocess_volume, resize_pad, znorm,
)
from conftest import ellipse_blob

images = arrays(np.float64, st.tuples(st.integers(2, 12), st.integers(2, 12)),
                elements=st.floats(-1e3, 1e3, allow_nan=False, allow_infinity=False))


def test_znorm_examples():
    assert np.array_equal(znorm(np.full((3, 3), 7.0)), np.zeros((3, 3)))
    assert znorm(np.array([0.0, 2.0, 0.0, 2.0])).tolist() == [-1.0, 1.0, -1.0, 1.0]


@settings(max_examples=200)
@given(images, st.floats(1e-2, 1e2), st.floats(-1e3, 1e3))
def test_znorm_affine_invariance_and_idempotence(img, a, b):
    # nearly constant images are ill-conditioned: rounding in a*img+b dominates their spread
    assume(img.std() > 1e-6 * (1.0 + np.abs(img).max()))
    z = znorm(img)
    assert np.max(np.abs(znorm(a * img + b) - z)) <= 1e-6
    assert np.max(np.abs(znorm(z) - z)) <= 1e-6


def test_hist_equalize_two_valued():
    img = np.array([0.0] * 25 + [5.0] * 75)
    out = hist_equalize(img)
    assert set(out[:25]) == {0.25}
    assert set(out[25:]) == {1.0}


def test_hist_equalize_constant_and_ramp():
    assert np.array_equal(hist_equalize(np.full((4, 4), 3.0)), np.ones((4, 4)))
    ramp = (np.arange(256) + 0.5) / 256.0
    out = hist_equalize(ramp)
    assert np.max(np.abs(out - ramp)) <= 1.0 / 256


@given(images)
def test_hist_equalize_monotone_and_bounded(img):
    out = hist_equalize(img)
    assert out.min() >= 0.0 and out.max() <= 1.0
    order = np.argsort(img.ravel(), kind="stable")
    assert np.all(np.diff(out.ravel()[order]) >= 0)


def test_crop_examples():
    m = np.zeros((40, 40), bool)
    m[6:31, 4:21] = True
    assert crop_box_for(BinaryMask2D(m), 1) == CropBox(3, 5, 19, 27)  # x 3..21, y 5..31

    single = BinaryMask2D.from_pixels(32, 32, [(10, 10)])
    assert crop_box_for(single, 1) == CropBox(9, 9, 3, 3)

    full = BinaryMask2D(np.ones((8, 6), bool))
    assert crop_box_for(full, 1) == CropBox(0, 0, 6, 8)

    with pytest.raises(InvalidArgumentError):
        crop_box_for(BinaryMask2D.empty(4, 4))


def test_crop_patch_contents():
    img = np.arange(100.0).reshape(10, 10)
    m = BinaryMask2D.from_pixels(10, 10, [(4, 5)])
    patch, box = crop_patch(img, m, 1)
    assert np.array_equal(patch, img[4:7, 3:6])
    assert box == CropBox(3, 4, 3, 3)


def test_resize_pad_wide_patch():
    patch = np.ones((64, 128))
    out, t = resize_pad(patch, 256)
    assert t.scale == 2.0
    assert (t.pad_top, t.pad_left) == (64, 0)
    assert (t.scaled_h, t.scaled_w) == (128, 256)
    assert np.all(out[:64] == 0.0) and np.all(out[192:] == 0.0)
    assert np.allclose(out[64:192], 1.0)


def test_resize_pad_square_identity():
    rng = np.random.default_rng(0)
    patch = rng.random((256, 256))
    out, t = resize_pad(patch, 256)
    assert t.scale == 1.0 and (t.pad_left, t.pad_top) == (0, 0)
    assert np.allclose(out, patch, atol=1e-12)


def test_resize_pad_padding_exact_zero_random():
    rng = np.random.default_rng(3)
    for _ in range(50):
        h, w = rng.integers(3, 90, size=2)
        patch = rng.normal(5.0, 2.0, (h, w))
        out, t = resize_pad(patch, 64)
        inner = np.zeros_like(out, bool)
        inner[t.pad_top:t.pad_top + t.scaled_h, t.pad_left:t.pad_left + t.scaled_w] = True
        assert np.all(out[~inner] == 0.0)


def test_mask_round_trip_seeded_blobs():
    rng = np.random.default_rng(11)
    geom = VolumeGeometry(96, 96, 1)
    worst = 1.0
    for _ in range(100):
        organ = ellipse_blob(96, 96, rng, min_area=400)
        lesion = BinaryMask2D(organ.bits & ellipse_blob(96, 96, rng, min_area=100).bits)
        if lesion.area < 100:
            lesion = organ
        _, box = crop_patch(np.zeros((96, 96)), organ)
        _, t = resize_pad(np.zeros((box.h, box.w)), 256, box)
        back = mask_to_original(mask_to_patch(lesion, t), t, geom)
        worst = min(worst, dice2d(back, lesion))
    assert worst >= 0.98


def test_mask_to_original_trivial_and_errors():
    t = PatchTransform(2, 3, 4, 4, 1.0, 0, 0, 4)
    geom = VolumeGeometry(10, 10, 1)
    assert mask_to_original(BinaryMask2D.empty(4, 4), t, geom).is_empty()
    full = mask_to_original(BinaryMask2D(np.ones((4, 4), bool)), t, geom)
    expected = np.zeros((10, 10), bool)
    expected[3:7, 2:6] = True
    assert np.array_equal(full.bits, expected)
    with pytest.raises(InvalidArgumentError):
        mask_to_original(BinaryMask2D.empty(5, 5), t, geom)
    with pytest.raises(InvalidArgumentError):
        mask_to_original(BinaryMask2D.empty(4, 4), t, VolumeGeometry(5, 5, 1))


def test_patch_transform_dict_round_trip():
    t = PatchTransform(1, 2, 30, 40, 6.4, 32, 0, 256)
    assert PatchTransform.from_dict(t.to_dict()) == t


def test_preprocess_volume_shapes():
    rng = np.random.default_rng(1)
    vol = rng.random((2, 3, 20, 24))
    gland = np.zeros((3, 20, 24), bool)
    gland[1, 5:12, 6:18] = True
    out, t = preprocess_volume(vol, gland, target=32)
    assert out.shape == (2, 3, 32, 32)
    assert (t.crop_x0, t.crop_y0, t.crop_w, t.crop_h) == (5, 4, 14, 9)
    assert out.min() >= 0.0 and out.max() <= 1.0
