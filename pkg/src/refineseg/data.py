"""Sample manifests, stratified splitting and the synthetic scene generator.

On-disk layout, one directory per sample::

    <root>/<id>/satellite.png
    <root>/<id>/map.png
    <root>/<id>/mask.png          single channel, 0/255
    <root>/<id>/meta.json         {instruction, tier, class_label, gt_boxes[, scene]}
"""

from __future__ import annotations

import json
import logging
import math
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .geometry import BBox
from .pngio import read_mask, read_rgb, write_mask, write_rgb
from .segmenter import Blob, SyntheticScene

__all__ = [
    "TIERS",
    "Sample",
    "Dataset",
    "SplitSpec",
    "SceneParams",
    "load_manifest",
    "write_manifest",
    "split",
    "synth_generate",
    "CLASS_NAMES",
]

log = logging.getLogger(__name__)

TIERS = ("name", "class", "function")

CLASS_NAMES = (
    "school",
    "park",
    "hospital",
    "market",
    "stadium",
    "museum",
    "railway station",
    "cemetery",
)


@dataclass(eq=False)
class Sample:
    id: str
    satellite: np.ndarray
    map: np.ndarray
    gt_mask: np.ndarray
    gt_boxes: list[BBox]
    instruction: str
    tier: str
    class_label: str
    scene: SyntheticScene | None = None

    @property
    def width(self) -> int:
        return self.gt_mask.shape[1]

    @property
    def height(self) -> int:
        return self.gt_mask.shape[0]

    def validate(self) -> None:
        if not self.gt_boxes:
            raise ValueError("no ground-truth boxes")
        if not self.gt_mask.any():
            raise ValueError("empty ground-truth mask")
        if self.tier not in TIERS:
            raise ValueError(f"unknown tier {self.tier!r}")
        shape = self.gt_mask.shape
        if self.satellite.shape[:2] != shape or self.map.shape[:2] != shape:
            raise ValueError("satellite, map and mask sizes differ")


@dataclass
class Dataset:
    samples: list[Sample]
    skipped: list[str] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.samples)

    def __iter__(self) -> Iterator[Sample]:
        return iter(self.samples)

    def __getitem__(self, i: int) -> Sample:
        return self.samples[i]

    def by_id(self) -> dict[str, Sample]:
        return {s.id: s for s in self.samples}


def _scene_to_json(scene: SyntheticScene) -> dict:
    return {
        "width": scene.width,
        "height": scene.height,
        "gt_instance": scene.gt_instance,
        "blobs": [
            {"core": b.core.to_list(), "full": b.full.to_list(), "class_id": b.class_id}
            for b in scene.blobs
        ],
    }


def _scene_from_json(d: dict) -> SyntheticScene:
    blobs = tuple(
        Blob(BBox.from_list(b["core"]), BBox.from_list(b["full"]), int(b["class_id"]))
        for b in d["blobs"]
    )
    return SyntheticScene(int(d["width"]), int(d["height"]), blobs, int(d["gt_instance"]))


def write_manifest(dataset: Dataset | Sequence[Sample], root) -> Path:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    for s in dataset:
        d = root / s.id
        d.mkdir(parents=True, exist_ok=True)
        write_rgb(d / "satellite.png", s.satellite)
        write_rgb(d / "map.png", s.map)
        write_mask(d / "mask.png", s.gt_mask)
        meta = {
            "instruction": s.instruction,
            "tier": s.tier,
            "class_label": s.class_label,
            "gt_boxes": [b.to_list() for b in s.gt_boxes],
        }
        if s.scene is not None:
            meta["scene"] = _scene_to_json(s.scene)
        (d / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True), encoding="utf-8")
    return root


def _load_sample(d: Path) -> Sample:
    meta = json.loads((d / "meta.json").read_text(encoding="utf-8"))
    scene = _scene_from_json(meta["scene"]) if "scene" in meta else None
    s = Sample(
        id=d.name,
        satellite=read_rgb(d / "satellite.png"),
        map=read_rgb(d / "map.png"),
        gt_mask=read_mask(d / "mask.png"),
        gt_boxes=[BBox.from_list(b) for b in meta["gt_boxes"]],
        instruction=str(meta["instruction"]),
        tier=str(meta["tier"]),
        class_label=str(meta["class_label"]),
        scene=scene,
    )
    s.validate()
    return s


def load_manifest(root) -> Dataset:
    """Load every sample directory under ``root``; invalid samples are skipped and listed."""
    root = Path(root)
    if not root.is_dir():
        raise FileNotFoundError(f"dataset root not readable: {root}")
    samples, skipped = [], []
    for d in sorted(p for p in root.iterdir() if p.is_dir()):
        try:
            samples.append(_load_sample(d))
        except (OSError, ValueError, KeyError, TypeError) as exc:
            log.warning("skipping sample %s: %s", d.name, exc)
            skipped.append(d.name)
    return Dataset(samples, skipped)


@dataclass(frozen=True)
class SplitSpec:
    train: float = 6.0
    val: float = 1.0
    test: float = 3.0

    def __post_init__(self):
        if min(self.train, self.val, self.test) <= 0:
            raise ValueError("split ratios must be positive")

    @property
    def fractions(self) -> tuple[float, float, float]:
        total = self.train + self.val + self.test
        return self.train / total, self.val / total, self.test / total


def _apportion(n: int, fractions: Sequence[float]) -> list[int]:
    """Largest-remainder rounding; remainder ties go to the larger ratio."""
    exact = [n * f for f in fractions]
    counts = [math.floor(x) for x in exact]
    order = sorted(
        range(len(fractions)), key=lambda i: (-(exact[i] - counts[i]), -fractions[i], i)
    )
    for i in order[: n - sum(counts)]:
        counts[i] += 1
    return counts


def split(dataset: Dataset, spec: SplitSpec = SplitSpec(), seed: int = 0):
    """Stratified train/val/test partition over (tier, class_label)."""
    if len(dataset) == 0:
        raise ValueError("cannot split an empty dataset")
    strata: dict[tuple[str, str], list[Sample]] = defaultdict(list)
    for s in dataset:
        strata[(s.tier, s.class_label)].append(s)
    rng = np.random.default_rng(seed)
    parts: list[list[Sample]] = [[], [], []]
    for key in sorted(strata):
        members = sorted(strata[key], key=lambda s: s.id)
        members = [members[i] for i in rng.permutation(len(members))]
        start = 0
        for part, count in zip(parts, _apportion(len(members), spec.fractions)):
            part.extend(members[start : start + count])
            start += count
    return tuple(Dataset(sorted(p, key=lambda s: s.id)) for p in parts)


@dataclass(frozen=True)
class SceneParams:
    size: int = 64
    grid: int = 16
    min_blobs: int = 1
    max_blobs: int = 3
    min_cells: int = 4
    max_cells: int = 8
    n_classes: int = len(CLASS_NAMES)


def _palette(class_id: int) -> np.ndarray:
    rng = np.random.default_rng(1000 + class_id)
    return rng.integers(60, 230, size=3).astype(np.uint8)


def _draw_scene(scene: SyntheticScene, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    h, w = scene.height, scene.width
    sat = rng.integers(70, 110, size=(h, w, 3)).astype(np.uint8)
    mp = np.full((h, w, 3), 242, dtype=np.uint8)
    for blob in scene.blobs:
        color = _palette(blob.class_id)
        f = [int(round(v)) for v in blob.full.to_list()]
        c = [int(round(v)) for v in blob.core.to_list()]
        sat[f[1] : f[3], f[0] : f[2]] = (0.6 * color + 0.4 * sat[f[1] : f[3], f[0] : f[2]]).astype(np.uint8)
        sat[c[1] : c[3], c[0] : c[2]] = color
        mp[f[1] : f[3], f[0]] = color
        mp[f[1] : f[3], f[2] - 1] = color
        mp[f[1], f[0] : f[2]] = color
        mp[f[3] - 1, f[0] : f[2]] = color
        # glyph: a bar whose length encodes the class id
        gx = f[0] + 2
        mp[f[1] + 2 : f[1] + 4, gx : min(gx + 1 + blob.class_id, f[2] - 1)] = 0
    return sat, mp


def _rand_scene(rng: np.random.Generator, p: SceneParams) -> SyntheticScene:
    cell = float(p.size) / p.grid
    n_blobs = int(rng.integers(p.min_blobs, p.max_blobs + 1))
    classes = rng.permutation(p.n_classes)[:n_blobs]
    occupied = np.zeros((p.grid, p.grid), dtype=bool)
    blobs: list[Blob] = []
    for class_id in classes:
        for _ in range(100):
            cw, ch = (int(v) for v in rng.integers(p.min_cells, p.max_cells + 1, size=2))
            gx = int(rng.integers(0, p.grid - cw + 1))
            gy = int(rng.integers(0, p.grid - ch + 1))
            # one free cell of margin keeps full extents disjoint
            y0, y1 = max(gy - 1, 0), min(gy + ch + 1, p.grid)
            x0, x1 = max(gx - 1, 0), min(gx + cw + 1, p.grid)
            if occupied[y0:y1, x0:x1].any():
                continue
            occupied[gy : gy + ch, gx : gx + cw] = True
            inset = [int(rng.integers(1, max(2, (d - 1) // 2 + 1))) for d in (cw, ch, cw, ch)]
            full = BBox(gx * cell, gy * cell, (gx + cw) * cell, (gy + ch) * cell)
            core = BBox(
                (gx + inset[0]) * cell,
                (gy + inset[1]) * cell,
                (gx + cw - inset[2]) * cell,
                (gy + ch - inset[3]) * cell,
            )
            blobs.append(Blob(core, full, int(class_id)))
            break
    if not blobs:
        raise RuntimeError("could not place any blob; scene parameters too tight")
    target = int(rng.integers(0, len(blobs)))
    return SyntheticScene(p.size, p.size, tuple(blobs), target)


def synth_generate(seed: int, n: int, params: SceneParams = SceneParams()) -> Dataset:
    """Seeded synthetic dataset; every sample carries its oracle scene."""
    if n < 1:
        raise ValueError("n must be at least 1")
    rng = np.random.default_rng(seed)
    samples = []
    width = len(str(n - 1))
    for i in range(n):
        scene = _rand_scene(rng, params)
        sat, mp = _draw_scene(scene, rng)
        target = scene.target
        label = CLASS_NAMES[target.class_id % len(CLASS_NAMES)]
        samples.append(
            Sample(
                id=f"synth_{i:0{width}d}",
                satellite=sat,
                map=mp,
                gt_mask=scene.gt_mask(),
                gt_boxes=[target.full],
                instruction=f"segment the {label} (class {target.class_id})",
                tier=TIERS[int(rng.integers(0, len(TIERS)))],
                class_label=label,
                scene=scene,
            )
        )
    return Dataset(samples)
