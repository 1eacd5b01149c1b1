"""cIoU, gIoU and per-record F1 over prediction / ground-truth mask pairs."""

from __future__ import annotations

from collections import Counter, defaultdict
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .geometry import mask_inter_union

__all__ = ["EvalRecord", "giou", "ciou", "f1", "per_class_accuracy", "summarize", "METRICS"]


@dataclass(eq=False)
class EvalRecord:
    sample_id: str
    pred_mask: np.ndarray
    gt_mask: np.ndarray
    class_label: str = ""
    tier: str = "class"

    def __post_init__(self):
        if self.pred_mask.shape != self.gt_mask.shape:
            raise ValueError(f"{self.sample_id}: mask shapes differ")

    @property
    def inter_union(self) -> tuple[int, int]:
        return mask_inter_union(self.pred_mask, self.gt_mask)

    @property
    def iou(self) -> float:
        i, u = self.inter_union
        return i / u if u else 0.0


def _nonempty(records):
    if not records:
        raise ValueError("no records")
    return records


def giou(records: Sequence[EvalRecord]) -> float:
    """Mean of per-record IoU."""
    return float(np.mean([r.iou for r in _nonempty(records)]))


def ciou(records: Sequence[EvalRecord]) -> float:
    """Cumulative IoU: total intersection over total union."""
    iu = np.array([r.inter_union for r in _nonempty(records)], dtype=np.int64)
    union = iu[:, 1].sum()
    return float(iu[:, 0].sum() / union) if union else 0.0


def f1(records: Sequence[EvalRecord], iou_threshold: float = 0.5) -> float:
    """Per-record F1. A nonempty prediction below threshold is both a FP and a FN."""
    if not 0.0 < iou_threshold < 1.0:
        raise ValueError("iou_threshold must lie in (0, 1)")
    tp = fp = fn = 0
    for r in _nonempty(records):
        has_pred = bool(r.pred_mask.any())
        hit = has_pred and r.iou >= iou_threshold
        tp += hit
        fp += has_pred and not hit
        fn += (not hit) and bool(r.gt_mask.any())
    denom = 2 * tp + fp + fn
    return 2 * tp / denom if denom else 0.0


METRICS: dict[str, Callable] = {"ciou": ciou, "giou": giou, "f1": f1}


def per_class_accuracy(
    records: Sequence[EvalRecord],
    grouping: str = "class_label",
    metric: str = "giou",
    top_k: int | None = None,
) -> list[tuple[str, int, float]]:
    """(class, count, value) rows, most frequent class first."""
    groups: dict[str, list[EvalRecord]] = defaultdict(list)
    for r in _nonempty(records):
        groups[str(getattr(r, grouping))].append(r)
    counts = Counter({k: len(v) for k, v in groups.items()})
    order = sorted(counts, key=lambda k: (-counts[k], k))
    if top_k is not None:
        order = order[:top_k]
    fn = METRICS[metric]
    return [(k, counts[k], fn(groups[k])) for k in order]


def summarize(records: Sequence[EvalRecord], iou_threshold: float = 0.5) -> dict:
    """Overall and per-tier cIoU / gIoU / F1."""
    def block(rs):
        return {"ciou": ciou(rs), "giou": giou(rs), "f1": f1(rs, iou_threshold), "count": len(rs)}

    out = {"all": block(records)}
    tiers: dict[str, list[EvalRecord]] = defaultdict(list)
    for r in records:
        tiers[r.tier].append(r)
    for t in sorted(tiers):
        out[t] = block(tiers[t])
    return out
