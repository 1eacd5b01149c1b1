import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from refineseg.geometry import BBox, rasterize_rect_union
from refineseg.render import OverlayStyle, overlay


def test_identity():
    img = np.random.default_rng(0).integers(0, 256, (6, 7, 3), dtype=np.uint8)
    out = overlay(img, [], np.zeros((6, 7), bool))
    assert out.tobytes() == img.tobytes() and out is not img


def test_saturated_mask():
    img = np.zeros((8, 8, 3), np.uint8)
    style = OverlayStyle(mask_alpha=1.0, mask_color=(1, 2, 3), box_stroke=1)
    out = overlay(img, [BBox(2, 2, 6, 6)], np.ones((8, 8), bool), style)
    stroke = np.zeros((8, 8), bool)
    stroke[2:6, 2:6] = True
    stroke[3:5, 3:5] = False
    assert (out[~stroke] == (1, 2, 3)).all()
    assert (out[stroke] == style.box_color).all()


def test_half_blend_rounds_up():
    img = np.zeros((4, 4, 3), np.uint8)
    m = np.zeros((4, 4), bool)
    m[1:3, 1:3] = True
    out = overlay(img, [], m, OverlayStyle(mask_color=(255, 0, 0), mask_alpha=0.5))
    # 0.5 * 255 = 127.5 -> 128
    assert (out[m] == (128, 0, 0)).all()
    assert (out[~m] == 0).all()


def test_default_style():
    s = OverlayStyle()
    assert (s.box_color, s.box_stroke, s.mask_color, s.mask_alpha) == ((255, 0, 0), 3, (0, 255, 0), 0.4)
    with pytest.raises(ValueError):
        OverlayStyle(mask_alpha=0)
    with pytest.raises(ValueError):
        OverlayStyle(box_stroke=0)


def test_shape_mismatch():
    with pytest.raises(ValueError):
        overlay(np.zeros((4, 4, 3), np.uint8), [], np.zeros((4, 5), bool))


@given(st.integers(0, 2**32 - 1), st.lists(st.tuples(*[st.integers(-2, 14)] * 4), max_size=3))
def test_untouched_region_is_exact(seed, raw_boxes):
    rng = np.random.default_rng(seed)
    img = rng.integers(0, 256, (12, 12, 3), dtype=np.uint8)
    before = img.copy()
    mask = rng.random((12, 12)) < 0.3
    boxes = [BBox.from_list(list(b)) for b in raw_boxes]
    out = overlay(img, boxes, mask)
    assert np.array_equal(img, before)
    assert np.array_equal(out, overlay(img, boxes, mask))
    changed = (out != img).any(axis=2)
    touched = mask | rasterize_rect_union(boxes, 12, 12)
    assert not (changed & ~touched).any()
