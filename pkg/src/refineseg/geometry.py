"""Boxes, points, binary masks and assignment.

Pixel model: a pixel belongs to a continuous box iff its center lies inside the
box (boundaries inclusive). Box IoU uses continuous areas; mask IoU uses bit
counts. Masks are ``(H, W)`` boolean numpy arrays.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from itertools import permutations
from typing import Iterable, Sequence

import numpy as np

__all__ = [
    "BBox",
    "Point2D",
    "box_iou",
    "mask_iou",
    "mask_inter_union",
    "hungarian_assign",
    "linear_sum_assignment",
    "brute_force_assignment",
    "match_count",
    "rasterize_rect_union",
    "empty_mask",
]


@dataclass(frozen=True)
class BBox:
    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        for v in (self.x1, self.y1, self.x2, self.y2):
            if not math.isfinite(v):
                raise ValueError(f"non-finite box coordinate: {v!r}")

    @classmethod
    def from_list(cls, xs: Sequence[float]) -> "BBox":
        if len(xs) != 4:
            raise ValueError(f"a box needs 4 coordinates, got {len(xs)}")
        return cls(*(float(x) for x in xs)).normalized()

    def normalized(self) -> "BBox":
        """Return the box with ``x1 <= x2`` and ``y1 <= y2``."""
        x1, x2 = sorted((self.x1, self.x2))
        y1, y2 = sorted((self.y1, self.y2))
        return BBox(x1, y1, x2, y2)

    def clamped(self, width: float, height: float) -> "BBox":
        b = self.normalized()
        return BBox(
            min(max(b.x1, 0.0), width),
            min(max(b.y1, 0.0), height),
            min(max(b.x2, 0.0), width),
            min(max(b.y2, 0.0), height),
        )

    @property
    def area(self) -> float:
        return max(self.x2 - self.x1, 0.0) * max(self.y2 - self.y1, 0.0)

    def contains(self, p: "Point2D") -> bool:
        return self.x1 <= p.x <= self.x2 and self.y1 <= p.y <= self.y2

    def intersection(self, other: "BBox") -> "BBox | None":
        x1, y1 = max(self.x1, other.x1), max(self.y1, other.y1)
        x2, y2 = min(self.x2, other.x2), min(self.y2, other.y2)
        if x2 < x1 or y2 < y1:
            return None
        return BBox(x1, y1, x2, y2)

    def to_list(self) -> list[float]:
        return [self.x1, self.y1, self.x2, self.y2]


@dataclass(frozen=True)
class Point2D:
    x: float
    y: float

    def __post_init__(self):
        if not (math.isfinite(self.x) and math.isfinite(self.y)):
            raise ValueError(f"non-finite point: ({self.x!r}, {self.y!r})")

    def clamped(self, width: float, height: float) -> "Point2D":
        return Point2D(min(max(self.x, 0.0), width), min(max(self.y, 0.0), height))

    def to_list(self) -> list[float]:
        return [self.x, self.y]


def box_iou(a: BBox, b: BBox) -> float:
    """Continuous-area IoU of two normalized boxes.

    Identical boxes give 1.0 when they have positive area. A zero union
    (two identical degenerate boxes) gives 0.0.
    """
    if a == b:
        return 1.0 if a.area > 0 else 0.0
    inter = a.intersection(b)
    inter_area = inter.area if inter is not None else 0.0
    union = a.area + b.area - inter_area
    if union <= 0.0:
        return 0.0
    return inter_area / union


def mask_inter_union(a: np.ndarray, b: np.ndarray) -> tuple[int, int]:
    if a.shape != b.shape:
        raise ValueError(f"mask shape mismatch: {a.shape} vs {b.shape}")
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    return int(np.count_nonzero(a & b)), int(np.count_nonzero(a | b))


def mask_iou(a: np.ndarray, b: np.ndarray) -> float:
    """Pixel IoU. Two empty masks score 0."""
    inter, union = mask_inter_union(a, b)
    return inter / union if union else 0.0


def empty_mask(width: int, height: int) -> np.ndarray:
    return np.zeros((height, width), dtype=bool)


def rasterize_rect_union(shapes: Iterable[BBox], width: int, height: int) -> np.ndarray:
    if width <= 0 or height <= 0:
        raise ValueError("mask dimensions must be positive")
    mask = empty_mask(width, height)
    for box in shapes:
        b = box.clamped(width, height)
        # pixel c is inside iff x1 <= c + 0.5 <= x2
        c0 = max(math.ceil(b.x1 - 0.5), 0)
        c1 = min(math.floor(b.x2 - 0.5), width - 1)
        r0 = max(math.ceil(b.y1 - 0.5), 0)
        r1 = min(math.floor(b.y2 - 0.5), height - 1)
        if c1 >= c0 and r1 >= r0:
            mask[r0 : r1 + 1, c0 : c1 + 1] = True
    return mask


def _solve_rows_le_cols(cost: np.ndarray) -> list[int]:
    """Shortest augmenting path with potentials; requires n_rows <= n_cols.

    Returns the column assigned to each row.
    """
    n, m = cost.shape
    inf = math.inf
    u = [0.0] * (n + 1)
    v = [0.0] * (m + 1)
    p = [0] * (m + 1)  # p[j]: row (1-based) matched to column j, 0 = free
    way = [0] * (m + 1)
    a = cost.tolist()
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = [inf] * (m + 1)
        used = [False] * (m + 1)
        while True:
            used[j0] = True
            i0 = p[j0]
            row = a[i0 - 1]
            ui0 = u[i0]
            delta = inf
            j1 = 0
            for j in range(1, m + 1):
                if not used[j]:
                    cur = row[j - 1] - ui0 - v[j]
                    if cur < minv[j]:
                        minv[j] = cur
                        way[j] = j0
                    if minv[j] < delta:
                        delta = minv[j]
                        j1 = j
            for j in range(m + 1):
                if used[j]:
                    u[p[j]] += delta
                    v[j] -= delta
                else:
                    minv[j] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
    assigned = [0] * n
    for j in range(1, m + 1):
        if p[j]:
            assigned[p[j] - 1] = j - 1
    return assigned


def linear_sum_assignment(cost) -> list[tuple[int, int]]:
    """Minimum-cost assignment of size ``min(K, J)``, pairs sorted by row.

    Optimal but with no tie-break guarantee; see :func:`hungarian_assign`.
    """
    cost = np.asarray(cost, dtype=float)
    if cost.ndim != 2:
        raise ValueError("cost matrix must be 2-D")
    if cost.size == 0:
        return []
    if not np.all(np.isfinite(cost)):
        raise ValueError("cost matrix has non-finite entries")
    k, j = cost.shape
    if k <= j:
        cols = _solve_rows_le_cols(cost)
        return [(r, c) for r, c in enumerate(cols)]
    rows = _solve_rows_le_cols(cost.T)
    return sorted((r, c) for c, r in enumerate(rows))


def _total(cost: np.ndarray, pairs) -> float:
    return float(sum(cost[r, c] for r, c in pairs))


def hungarian_assign(cost, tol: float = 1e-9) -> list[tuple[int, int]]:
    """Minimum-cost assignment of size ``min(K, J)`` with a deterministic tie-break.

    Among all optimal assignments the one whose row-sorted pair list is
    lexicographically smallest is returned. Each row is fixed in turn to the
    lowest column that keeps the remaining subproblem optimal.
    """
    cost = np.asarray(cost, dtype=float)
    if cost.size == 0:
        return []
    pairs = linear_sum_assignment(cost)
    best = _total(cost, pairs)
    k, j = cost.shape
    size = min(k, j)
    scale = tol * max(1.0, float(np.abs(cost).max()) * size)

    fixed: list[tuple[int, int]] = []
    fixed_cost = 0.0
    used_cols: set[int] = set()
    for r in range(k):
        if len(fixed) == size:
            break
        rest_rows = list(range(r + 1, k))
        for c in range(j):
            if c in used_cols:
                continue
            rest_cols = [cc for cc in range(j) if cc not in used_cols and cc != c]
            need = size - len(fixed) - 1
            if min(len(rest_rows), len(rest_cols)) < need:
                continue
            sub = cost[np.ix_(rest_rows, rest_cols)] if need else np.empty((0, 0))
            sub_cost = _total(sub, linear_sum_assignment(sub)) if need else 0.0
            if fixed_cost + cost[r, c] + sub_cost <= best + scale:
                fixed.append((r, c))
                fixed_cost += cost[r, c]
                used_cols.add(c)
                break
    return fixed


def brute_force_assignment(cost) -> float:
    """Minimum total cost over all assignments of size ``min(K, J)`` by enumeration."""
    cost = np.asarray(cost, dtype=float)
    if cost.size == 0:
        return 0.0
    k, j = cost.shape
    if k > j:
        cost = cost.T
        k, j = j, k
    return min(
        sum(cost[r, c] for r, c in enumerate(cols)) for cols in permutations(range(j), k)
    )


def match_count(pred: Sequence[BBox], gt: Sequence[BBox], threshold: float = 0.5) -> int:
    """Number of Hungarian-assigned pairs whose box IoU strictly exceeds ``threshold``."""
    if not 0.0 < threshold < 1.0:
        raise ValueError("threshold must lie in (0, 1)")
    if not pred or not gt:
        return 0
    hits = np.array([[box_iou(p, g) > threshold for g in gt] for p in pred], dtype=float)
    if not hits.any():
        return 0
    pairs = linear_sum_assignment(1.0 - hits)
    return int(sum(hits[r, c] for r, c in pairs))
