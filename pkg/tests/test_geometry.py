import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from plm.geometry import (
    Box,
    GeometryError,
    ScoreMap,
    crop_resize,
    downsample_label,
    expand_box,
    load_image,
    load_mask,
    overlap_ratio,
    resize_area,
    resize_bilinear,
    resize_mask,
    restore_map,
    save_image,
    save_mask,
    tight_box,
)


def bilinear_oracle(img, out_h, out_w):
    """Per-pixel loop with half-pixel centres and edge clamping."""
    h, w = img.shape
    out = np.zeros((out_h, out_w))
    for i in range(out_h):
        sy = min(max((i + 0.5) * h / out_h - 0.5, 0.0), h - 1)
        y0 = int(math.floor(sy))
        y1 = min(y0 + 1, h - 1)
        fy = sy - y0
        for j in range(out_w):
            sx = min(max((j + 0.5) * w / out_w - 0.5, 0.0), w - 1)
            x0 = int(math.floor(sx))
            x1 = min(x0 + 1, w - 1)
            fx = sx - x0
            top = (1 - fx) * img[y0, x0] + fx * img[y0, x1]
            bot = (1 - fx) * img[y1, x0] + fx * img[y1, x1]
            out[i, j] = (1 - fy) * top + fy * bot
    return out


def area_oracle(img, out_h, out_w):
    """Upsample by the output size with np.repeat, then block-average."""
    h, w = img.shape
    big = np.repeat(np.repeat(img, out_h, axis=0), out_w, axis=1)
    return big.reshape(out_h, h, out_w, w).mean(axis=(1, 3))


boxes = st.builds(
    Box,
    x=st.integers(-20, 120),
    y=st.integers(-20, 120),
    w=st.integers(1, 80),
    h=st.integers(1, 80),
)


def test_box_rejects_empty():
    with pytest.raises(GeometryError):
        Box(0, 0, 0, 5)
    with pytest.raises(GeometryError):
        Box(0, 0, 5, -1)


def test_expand_box_hand_values():
    b = Box(10, 20, 40, 20)
    # 30% of 40 is 12, split 6 per side; 30% of 20 is 6, split 3 per side
    assert expand_box(b, 30, 200, 200) == Box(4, 17, 52, 26)
    assert expand_box(b, 0, 200, 200) == b


def test_expand_box_clamps_to_frame():
    b = Box(0, 0, 20, 20)
    e = expand_box(b, 50, 25, 100)
    assert (e.x, e.y) == (0, 0)
    assert e.x2 == 25


def test_overlap_ratio_hand_values():
    a = Box(0, 0, 10, 10)
    assert overlap_ratio(a, Box(5, 0, 10, 10)) == 0.5
    assert overlap_ratio(a, Box(20, 20, 5, 5)) == 0.0
    assert overlap_ratio(a, Box(-5, -5, 30, 30)) == 1.0


@given(boxes, boxes)
def test_overlap_ratio_range(a, b):
    r = overlap_ratio(a, b)
    assert 0.0 <= r <= 1.0
    assert overlap_ratio(a, a) == 1.0


@given(boxes, st.floats(0, 100))
def test_expand_contains_original_inside_frame(b, margin):
    try:
        inner = b.clamp(160, 160)
    except GeometryError:
        return
    e = expand_box(inner, margin, 160, 160)
    assert e.x <= inner.x and e.y <= inner.y
    assert e.x2 >= inner.x2 and e.y2 >= inner.y2
    assert 0 <= e.x and e.x2 <= 160 and 0 <= e.y and e.y2 <= 160


def test_tight_box():
    m = np.zeros((10, 12), dtype=bool)
    assert tight_box(m) is None
    m[2:5, 3:9] = True
    assert tight_box(m) == Box(3, 2, 6, 3)


@pytest.mark.parametrize("shape,out", [((7, 9), (5, 13)), ((20, 20), (100, 100)), ((31, 17), (50, 50)), ((3, 3), (1, 1))])
def test_bilinear_matches_loop_oracle(shape, out):
    img = np.random.default_rng(0).random(shape)
    np.testing.assert_allclose(resize_bilinear(img, *out), bilinear_oracle(img, *out), rtol=0, atol=1e-12)


def test_bilinear_identity_and_constant():
    img = np.random.default_rng(1).random((11, 6, 3))
    np.testing.assert_array_equal(resize_bilinear(img, 11, 6), img)
    const = np.full((13, 8), 0.3)
    np.testing.assert_allclose(resize_bilinear(const, 50, 50), 0.3, atol=1e-15)


@pytest.mark.parametrize("shape,out", [((10, 10), (5, 5)), ((17, 23), (50, 50)), ((90, 120), (50, 50)), ((4, 6), (3, 4))])
def test_area_matches_block_oracle(shape, out):
    img = np.random.default_rng(2).random(shape)
    np.testing.assert_allclose(resize_area(img, *out), area_oracle(img, *out), rtol=0, atol=1e-12)


@given(st.integers(1, 40), st.integers(1, 40), st.integers(1, 30), st.integers(1, 30))
@settings(max_examples=40, deadline=None)
def test_area_resize_preserves_mean(h, w, oh, ow):
    img = np.random.default_rng(h * 41 + w).random((h, w))
    assert resize_area(img, oh, ow).mean() == pytest.approx(img.mean(), abs=1e-12)


def test_resize_mask_tie_goes_to_foreground():
    m = np.array([[True, False]])
    assert resize_mask(m, 1, 1)[0, 0]


def test_crop_resize_shapes_and_rejects_tiny_box():
    img = np.random.default_rng(3).random((60, 80, 3)).astype(np.float32)
    p = crop_resize(img, Box(5, 7, 30, 21), frame_index=4)
    assert p.pixels.shape == (100, 100, 3)
    assert p.source_frame_index == 4
    with pytest.raises(GeometryError, match="too small"):
        crop_resize(img, Box(5, 5, 1, 10))


def test_downsample_label_convention():
    m = np.zeros((40, 40), dtype=bool)
    m[:, :20] = True
    lab = downsample_label(m, Box(0, 0, 40, 40))
    assert lab.shape == (50, 50)
    assert set(np.unique(lab)) == {0.0, 1.0}
    assert (lab[:, :25] == 0).all() and (lab[:, 25:] == 1).all()


def test_score_map_shape_checked():
    with pytest.raises(GeometryError):
        ScoreMap(np.zeros((10, 10)), Box(0, 0, 5, 5))


def test_restore_map_footprint():
    s = ScoreMap(np.full((50, 50), 0.25), Box(3, 4, 10, 6))
    values, valid = restore_map(s, 20, 12)
    assert valid.sum() == 60
    assert np.all(values[valid] == pytest.approx(0.25))
    assert np.all(values[~valid] == 0)


def test_mask_and_image_round_trip(tmp_path):
    rng = np.random.default_rng(4)
    m = rng.random((9, 13)) > 0.5
    save_mask(tmp_path / "m.png", m)
    np.testing.assert_array_equal(load_mask(tmp_path / "m.png"), m)
    img = np.round(rng.random((9, 13, 3)) * 255) / 255
    save_image(tmp_path / "i.png", img)
    np.testing.assert_allclose(load_image(tmp_path / "i.png"), img, atol=1e-6)


def test_expand_box_examples():
    assert expand_box(Box(10, 10, 40, 40), 25, 200, 200) == Box(5, 5, 50, 50)
    assert expand_box(Box(0, 0, 40, 40), 50, 100, 100) == Box(0, 0, 50, 50)


def test_checkerboard_upsample_keeps_corners():
    img = np.array([[0.0, 1.0], [1.0, 0.0]])
    out = resize_bilinear(img, 4, 4)
    assert out[0, 0] == 0.0 and out[0, 3] == 1.0 and out[3, 0] == 1.0 and out[3, 3] == 0.0


@given(arrays(bool, (50, 50)))
@settings(max_examples=30, deadline=None)
def test_label_round_trip_through_replication(grid):
    big = np.repeat(np.repeat(grid, 2, axis=0), 2, axis=1)
    np.testing.assert_array_equal(downsample_label(big, Box(0, 0, 100, 100)), np.where(grid, 0.0, 1.0))


def test_constant_label_grids():
    assert np.all(downsample_label(np.zeros((30, 30), bool), Box(0, 0, 30, 30)) == 1.0)
    assert np.all(downsample_label(np.ones((30, 30), bool), Box(0, 0, 30, 30)) == 0.0)


def test_restore_identity_on_full_frame():
    vals = np.random.default_rng(5).random((50, 50))
    out, valid = restore_map(ScoreMap(vals, Box(0, 0, 50, 50)), 50, 50)
    assert valid.all()
    np.testing.assert_array_equal(out, vals)


@given(st.integers(0, 40))
def test_overlap_monotone_under_translation(dx):
    a = Box(10, 10, 20, 20)
    assert overlap_ratio(a, Box(10 + dx + 1, 10, 20, 20)) <= overlap_ratio(a, Box(10 + dx, 10, 20, 20))
