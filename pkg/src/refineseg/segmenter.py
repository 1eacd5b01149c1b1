"""Promptable segmenters: a synthetic oracle and an HTTP mask-server client."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Protocol, Sequence

import httpx
import numpy as np

from .codec import PromptGroup
from .geometry import BBox, Point2D, empty_mask, rasterize_rect_union
from .pngio import decode_mask_b64, encode_png_b64

__all__ = [
    "PromptSet",
    "Blob",
    "SyntheticScene",
    "Segmenter",
    "OracleSegmenter",
    "RemoteSegmenter",
    "TransportError",
    "segment_groups",
]

log = logging.getLogger(__name__)


class TransportError(RuntimeError):
    """A remote backend failed after all retries. Safe to retry the whole call."""


@dataclass(frozen=True)
class PromptSet:
    boxes: tuple[BBox, ...]
    points: tuple[Point2D, ...] = ()

    def __bool__(self) -> bool:
        return bool(self.boxes) or bool(self.points)


@dataclass(frozen=True)
class Blob:
    core: BBox
    full: BBox
    class_id: int

    def __post_init__(self):
        c, f = self.core, self.full
        if not (f.x1 < c.x1 and f.y1 < c.y1 and c.x2 < f.x2 and c.y2 < f.y2):
            raise ValueError("blob core must lie strictly inside its full extent")


@dataclass(frozen=True)
class SyntheticScene:
    width: int
    height: int
    blobs: tuple[Blob, ...]
    gt_instance: int = 0

    @property
    def target(self) -> Blob:
        return self.blobs[self.gt_instance]

    def gt_mask(self) -> np.ndarray:
        return rasterize_rect_union([self.target.full], self.width, self.height)


class Segmenter(Protocol):
    def segment(self, target, prompts: PromptSet) -> np.ndarray: ...


def _selects(box: BBox, full: BBox) -> bool:
    inter = box.intersection(full)
    return inter is not None and inter.area > 0.5 * full.area


class OracleSegmenter:
    """Deterministic stand-in for a promptable segmenter on synthetic scenes.

    A blob is selected when some prompt box covers more than half of its full
    extent. A selected blob yields its core rectangle, or its full rectangle
    once any prompt point falls inside the full extent. Boxes alone therefore
    under-segment and points complete the mask.
    """

    needs_scene = True

    def segment(self, scene: SyntheticScene, prompts: PromptSet) -> np.ndarray:
        w, h = scene.width, scene.height
        boxes = [b.clamped(w, h) for b in prompts.boxes]
        points = [p.clamped(w, h) for p in prompts.points]
        rects = []
        for blob in scene.blobs:
            if not any(_selects(b, blob.full) for b in boxes):
                continue
            if any(blob.full.contains(p) for p in points):
                rects.append(blob.full)
            else:
                rects.append(blob.core)
        return rasterize_rect_union(rects, w, h)


@dataclass
class RemoteSegmenter:
    """Client for an HTTP mask server.

    Request body: ``{"image_id" | "image", "boxes": [[x1,y1,x2,y2]...],
    "points": [[x,y]...]}``. Response body: ``{"mask": <base64 PNG>}``.
    ``target`` is either an image id string or an ``(H, W, 3)`` uint8 array.
    """

    url: str
    timeout: float = 30.0
    retries: int = 2
    transport: httpx.BaseTransport | None = field(default=None, repr=False)

    def __post_init__(self):
        self._client = httpx.Client(timeout=self.timeout, transport=self.transport)

    def close(self) -> None:
        self._client.close()

    @staticmethod
    def request_body(target, prompts: PromptSet) -> dict:
        body: dict = {
            "boxes": [b.to_list() for b in prompts.boxes],
            "points": [p.to_list() for p in prompts.points],
        }
        if isinstance(target, str):
            body["image_id"] = target
        else:
            body["image"] = encode_png_b64(np.asarray(target))
        return body

    def segment(self, target, prompts: PromptSet) -> np.ndarray:
        if not prompts:
            raise ValueError("segment needs at least one prompt")
        body = self.request_body(target, prompts)
        last: Exception | None = None
        for attempt in range(self.retries + 1):
            try:
                resp = self._client.post(self.url, json=body)
                resp.raise_for_status()
                return decode_mask_b64(resp.json()["mask"])
            except (httpx.HTTPError, KeyError, ValueError, TypeError, OSError) as exc:
                last = exc
                log.warning("mask server attempt %d failed: %s", attempt + 1, exc)
        raise TransportError(f"mask server unavailable after {self.retries + 1} attempts") from last


def segment_groups(
    segmenter: Segmenter, target, groups: Sequence[PromptGroup], width: int, height: int
) -> np.ndarray:
    """One segmenter call per group; the fused mask is the union."""
    mask = empty_mask(width, height)
    for g in groups:
        mask |= segmenter.segment(target, PromptSet((g.box,), tuple(g.points)))
    return mask
