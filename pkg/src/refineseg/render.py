"""Overlay stage-1 boxes and the coarse mask onto an RGB image."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .geometry import BBox

__all__ = ["OverlayStyle", "overlay", "blend"]

RGB = tuple[int, int, int]


@dataclass(frozen=True)
class OverlayStyle:
    box_color: RGB = (255, 0, 0)
    box_stroke: int = 3
    mask_color: RGB = (0, 255, 0)
    mask_alpha: float = 0.4

    def __post_init__(self):
        if self.box_stroke < 1:
            raise ValueError("box stroke must be at least 1 pixel")
        if not 0.0 < self.mask_alpha <= 1.0:
            raise ValueError("mask alpha must lie in (0, 1]")


def blend(base: np.ndarray, color: RGB, alpha: float) -> np.ndarray:
    """round-half-up(alpha * color + (1 - alpha) * base), per channel."""
    mixed = alpha * np.asarray(color, dtype=np.float64) + (1.0 - alpha) * base.astype(np.float64)
    return np.floor(mixed + 0.5).clip(0, 255).astype(np.uint8)


def _box_pixels(box: BBox, width: int, height: int) -> tuple[int, int, int, int] | None:
    b = box.clamped(width, height)
    c0 = max(math.ceil(b.x1 - 0.5), 0)
    c1 = min(math.floor(b.x2 - 0.5), width - 1)
    r0 = max(math.ceil(b.y1 - 0.5), 0)
    r1 = min(math.floor(b.y2 - 0.5), height - 1)
    if c1 < c0 or r1 < r0:
        return None
    return r0, r1, c0, c1


def overlay(
    img: np.ndarray,
    boxes: Sequence[BBox],
    mask: np.ndarray,
    style: OverlayStyle = OverlayStyle(),
) -> np.ndarray:
    """Return a new image with the mask alpha-blended and box outlines drawn on top.

    Pixels outside the mask and the box strokes are copied unchanged.
    """
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"expected an (H, W, 3) image, got {img.shape}")
    if mask.shape != img.shape[:2]:
        raise ValueError(f"mask shape {mask.shape} does not match image {img.shape[:2]}")
    out = img.copy()
    sel = np.asarray(mask, dtype=bool)
    if sel.any():
        out[sel] = blend(img[sel], style.mask_color, style.mask_alpha)

    height, width = mask.shape
    s = style.box_stroke
    color = np.asarray(style.box_color, dtype=np.uint8)
    for box in boxes:
        px = _box_pixels(box, width, height)
        if px is None:
            continue
        r0, r1, c0, c1 = px
        out[r0 : min(r0 + s, r1 + 1), c0 : c1 + 1] = color
        out[max(r1 - s + 1, r0) : r1 + 1, c0 : c1 + 1] = color
        out[r0 : r1 + 1, c0 : min(c0 + s, c1 + 1)] = color
        out[r0 : r1 + 1, max(c1 - s + 1, c0) : c1 + 1] = color
    return out
