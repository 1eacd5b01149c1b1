"""Stage rewards with the format gate.

Each stage reward is the unweighted sum format + accuracy + length, except that
an invalid format zeroes the whole episode.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .codec import Completion, Stage2Answer, format_reward
from .geometry import BBox, mask_iou, match_count

__all__ = [
    "RewardBreakdown",
    "LengthRewardParams",
    "stage1_length_reward",
    "stage1_accuracy_reward",
    "stage1_reward",
    "point_reward",
    "point_length_reward",
    "stage2_reward",
]


@dataclass(frozen=True)
class RewardBreakdown:
    format: int
    accuracy: float
    length: float

    @property
    def total(self) -> float:
        if not self.format:
            return 0.0
        return self.format + self.accuracy + self.length

    def as_dict(self) -> dict:
        return {
            "format": self.format,
            "accuracy": self.accuracy,
            "length": self.length,
            "total": self.total,
        }


@dataclass(frozen=True)
class LengthRewardParams:
    mu: float = 2.0
    sigma: float = 2.0

    def __post_init__(self):
        if not self.sigma > 0:
            raise ValueError("sigma must be positive")


_GATED = RewardBreakdown(0, 0.0, 0.0)


def stage1_length_reward(k: int, j: int) -> float:
    """exp(-2 |K - J| / J); rewards predicting the right number of instances."""
    if j <= 0:
        raise ValueError("stage-1 length reward needs J > 0 ground-truth boxes")
    return math.exp(-2.0 * abs(k - j) / j)


def stage1_accuracy_reward(
    pred: Sequence[BBox], gt: Sequence[BBox], threshold: float = 0.5
) -> float:
    if not gt:
        raise ValueError("ground truth must be nonempty")
    if not pred:
        return 0.0
    return match_count(pred, gt, threshold) / max(len(pred), len(gt))


def stage1_reward(c: Completion, gt: Sequence[BBox], threshold: float = 0.5) -> RewardBreakdown:
    if not gt:
        raise ValueError("ground truth must be nonempty")
    if not format_reward(c):
        return _GATED
    boxes = c.parsed.boxes
    return RewardBreakdown(
        1,
        stage1_accuracy_reward(boxes, gt, threshold),
        stage1_length_reward(len(boxes), len(gt)),
    )


def point_reward(n: int, params: LengthRewardParams = LengthRewardParams()) -> float:
    return math.exp(-((n - params.mu) ** 2) / (2.0 * params.sigma**2))


def point_length_reward(
    group_point_counts: Sequence[int], params: LengthRewardParams = LengthRewardParams()
) -> float:
    """Mean Gaussian point-count score over groups; 0 for an empty group list."""
    if len(group_point_counts) == 0:
        return 0.0
    return float(np.mean([point_reward(n, params) for n in group_point_counts]))


def stage2_reward(
    c: Completion,
    final_mask: np.ndarray,
    gt_mask: np.ndarray,
    params: LengthRewardParams = LengthRewardParams(),
) -> RewardBreakdown:
    if final_mask.shape != gt_mask.shape:
        raise ValueError(f"mask shape mismatch: {final_mask.shape} vs {gt_mask.shape}")
    if not format_reward(c):
        return _GATED
    answer = c.parsed
    if not isinstance(answer, Stage2Answer):
        raise TypeError("stage-2 reward needs a stage-2 completion")
    counts = [len(g.points) for g in answer.groups]
    return RewardBreakdown(1, mask_iou(final_mask, gt_mask), point_length_reward(counts, params))
