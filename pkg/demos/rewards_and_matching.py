#!/usr/bin/env python
"""rewards_and_matching.py

Score a few hand-written completions against one ground-truth box and watch
the format gate, the matching accuracy and the count penalty at work.
"""

from refineseg import BBox, parse_completion, stage1_reward
from refineseg.geometry import box_iou, hungarian_assign

gt = [BBox(8, 8, 40, 40), BBox(44, 4, 60, 20)]

completions = {
    "both boxes": '<think>two parks</think><answer>[{"bbox_2d": [9, 8, 40, 41]}, {"bbox_2d": [44, 4, 60, 21]}]</answer>',
    "one box": '<think>one park</think><answer>[{"bbox_2d": [9, 8, 40, 41]}]</answer>',
    "three boxes": '<think>?</think><answer>[{"bbox_2d": [9, 8, 40, 41]}, {"bbox_2d": [0, 0, 4, 4]}, {"bbox_2d": [44, 4, 60, 21]}]</answer>',
    "no think block": '<answer>[{"bbox_2d": [9, 8, 40, 41]}]</answer>',
}

for name, text in completions.items():
    r = stage1_reward(parse_completion(text, 1), gt)
    print(f"{name:<16} format {r.format:.0f}  acc {r.accuracy:.3f}  len {r.length:.3f}  total {r.total:.3f}")

# the matching behind the accuracy term
pred = parse_completion(completions["three boxes"], 1).parsed.boxes
cost = [[1 - box_iou(p, g) for g in gt] for p in pred]
print("assignment (pred, gt):", hungarian_assign(cost))
