import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from tiledet.augment import (
    PIPELINE_ORDER, STRATEGY_OPS, AugmentationSpec, Strategy, apply_strategy, augment_patch, augmented_file_name,
    bbox_safe_random_crop, brightness_contrast, hflip, motion_blur, motion_kernel, patch_rng, pixel_dropout,
    random_shadow, vflip,
)
from tiledet.dataset import Annotation
from tiledet.errors import ConfigError
from tiledet.geometry import BBox
from tiledet.slicer import PatchRecord


def ann(x, y, w, h, cid=1, i=1):
    return Annotation(i, 1, cid, BBox(x, y, w, h))


def noise(h=100, w=100, seed=0):
    return np.random.default_rng(seed).integers(0, 256, (h, w, 3), dtype=np.uint8)


def inside(b: BBox, w, h):
    return b.x >= 0 and b.y >= 0 and b.x2 <= w and b.y2 <= h and b.w > 0 and b.h > 0


def test_strategy_composition():
    assert STRATEGY_OPS[Strategy.SPATIAL] == ("crop", "hflip", "vflip", "dropout")
    assert STRATEGY_OPS[Strategy.PIXEL] == ("blur", "brightness_contrast", "shadow")
    assert set(STRATEGY_OPS[Strategy.BOTH]) == set(PIPELINE_ORDER)
    assert STRATEGY_OPS[Strategy.NONE] == ()


def test_flip_examples():
    img = noise()
    out, boxes = hflip(img, [ann(0, 0, 10, 10)])
    assert boxes[0].bbox == BBox(90, 0, 10, 10)
    assert np.array_equal(out[:, 0], img[:, -1])
    _, boxes = vflip(img, [ann(40, 40, 20, 20)])
    assert boxes[0].bbox == BBox(40, 40, 20, 20)


@given(st.integers(0, 89), st.integers(0, 89), st.integers(1, 10), st.integers(1, 10))
def test_flips_are_involutions(x, y, w, h):
    img = noise(100, 120, 1)
    a = [ann(x, y, w, h, cid=3)]
    for flip in (hflip, vflip):
        r1, b1 = flip(img, a)
        r2, b2 = flip(r1, b1)
        assert np.array_equal(r2, img)
        assert b2[0].bbox == a[0].bbox and b2[0].category_id == 3


def test_crop_no_boxes_hits_target():
    out, boxes = bbox_safe_random_crop(noise(), [], (64, 48), np.random.default_rng(0))
    assert out.shape == (48, 64, 3) and boxes == []


def test_crop_full_box_is_rescale_only():
    img = noise(100, 100)
    out, boxes = bbox_safe_random_crop(img, [ann(0, 0, 100, 100)], (50, 50), np.random.default_rng(3))
    assert out.shape == (50, 50, 3)
    assert boxes[0].bbox == BBox(0, 0, 50, 50)


def test_crop_keeps_hull_over_many_seeds():
    img = noise(100, 100)
    anns = [ann(10, 10, 30, 30, i=1), ann(60, 70, 30, 20, i=2)]
    for seed in range(1000):
        rng = np.random.default_rng(seed)
        out, boxes = bbox_safe_random_crop(img, anns, (100, 100), rng)
        assert out.shape == (100, 100, 3)
        assert all(inside(b.bbox, 100, 100) for b in boxes)
        # scale is shared, so relative geometry is preserved
        b0, b1 = boxes[0].bbox, boxes[1].bbox
        assert (b1.x - b0.x) / 50 == pytest.approx(b0.w / 30, rel=1e-9)


def test_dropout_rates():
    img = np.full((500, 500, 3), 200, dtype=np.uint8)
    assert np.array_equal(pixel_dropout(img, np.random.default_rng(0), rate=0.0), img)
    assert not pixel_dropout(img, np.random.default_rng(0), rate=1.0).any()
    dropped = int((pixel_dropout(img, np.random.default_rng(0))[..., 0] == 0).sum())
    sigma = (250000 * 0.01 * 0.99) ** 0.5
    assert abs(dropped - 2500) <= 3 * sigma


def test_brightness_contrast_arithmetic():
    img = noise()
    assert np.array_equal(brightness_contrast(img, alpha=1.0, beta=0.0), img)
    gray = np.full((4, 4, 3), 100, dtype=np.uint8)
    assert np.all(brightness_contrast(gray, alpha=1.0, beta=0.2) == 151)
    bright = np.full((4, 4, 3), 240, dtype=np.uint8)
    assert np.all(brightness_contrast(bright, alpha=1.0, beta=0.2) == 255)
    flt = np.full((2, 2), 0.5)
    assert np.allclose(brightness_contrast(flt, alpha=1.0, beta=0.2), 0.7)


def test_motion_blur_constant_raster():
    img = np.full((40, 50, 3), 77, dtype=np.uint8)
    for seed in range(10):
        assert np.array_equal(motion_blur(img, np.random.default_rng(seed)), img)


@pytest.mark.parametrize("length", [3, 5, 7])
def test_motion_kernel_normalised(length):
    k = motion_kernel(length, 33.0)
    assert k.shape == (length, length) and k.sum() == pytest.approx(1.0)


def test_shadow_darkens_only():
    img = np.full((60, 60, 3), 200, dtype=np.uint8)
    out = random_shadow(img, np.random.default_rng(5))
    assert (out <= img).all() and (out < img).any()
    vals = np.unique(out)
    assert all(200 * 0.3 - 1 <= v <= 200 for v in vals)


def test_strategy_none_is_identity():
    img = noise()
    a = [ann(5, 5, 10, 10)]
    out, boxes = apply_strategy(img, a, AugmentationSpec(Strategy.NONE), np.random.default_rng(0))
    assert np.array_equal(out, img) and boxes == a


@given(st.integers(0, 10_000))
def test_pixel_strategy_never_moves_boxes(seed):
    img = noise(64, 64)
    a = [ann(5.25, 6.5, 10.125, 3.0), ann(30, 30, 20, 20, cid=2, i=2)]
    _, boxes = apply_strategy(img, a, AugmentationSpec(Strategy.PIXEL, probability=1.0),
                              np.random.default_rng(seed))
    assert boxes == a


@given(st.integers(0, 10_000), st.sampled_from([Strategy.SPATIAL, Strategy.BOTH]))
def test_geometry_safety_and_label_preservation(seed, strategy):
    img = noise(80, 90)
    a = [ann(0, 0, 12, 7, cid=4), ann(70.5, 60.25, 19.5, 19.75, cid=2, i=2)]
    out, boxes = apply_strategy(img, a, AugmentationSpec(strategy, probability=0.5),
                                np.random.default_rng(seed))
    h, w = out.shape[:2]
    assert (w, h) == (90, 80)
    assert [b.category_id for b in boxes] == [4, 2]
    assert all(inside(b.bbox, w, h) for b in boxes)


def test_determinism_per_patch():
    rec = PatchRecord(17, 1, 0, 0, 64, 64, (ann(3, 4, 20, 20),))
    img = noise(64, 64)
    spec = AugmentationSpec(Strategy.BOTH, seed=9)
    r1, b1 = augment_patch(rec, img, spec)
    r2, b2 = augment_patch(rec, img, spec)
    assert np.array_equal(r1, r2) and b1 == b2
    assert patch_rng(9, 17).random() == patch_rng(9, 17).random()


def test_crop_target_default_is_patch_size():
    img = noise(70, 50)
    out, _ = apply_strategy(img, [ann(1, 1, 5, 5)], AugmentationSpec(Strategy.SPATIAL, probability=1.0),
                            np.random.default_rng(0))
    assert out.shape[:2] == (70, 50)


@pytest.mark.parametrize("bad", [dict(probability=1.5), dict(probability=-0.1), dict(crop_target=(0, 5)),
                                 dict(strategy="wild")])
def test_spec_validation(bad):
    with pytest.raises((ConfigError, ValueError)):
        AugmentationSpec(**bad)


def test_augmented_file_name():
    assert augmented_file_name("a__p000001.png", 3) == "a__p000001__aug3.png"
    assert augmented_file_name("noext", 0) == "noext__aug0"
