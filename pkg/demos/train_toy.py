#!/usr/bin/env python
"""train_toy.py

Two-stage GRPO on the toy policy with the oracle segmenter. Prints 50-step
averages of stage-1 accuracy, coarse and final mask IoU, then evaluates the
greedy policy.
"""

import sys

import numpy as np

from refineseg import (
    EvalRecord,
    GrpoConfig,
    GrpoTrainer,
    OracleSegmenter,
    ToyPolicy,
    infer,
    summarize,
    synth_generate,
)

steps = int(sys.argv[1]) if len(sys.argv) > 1 else 300

scenes = synth_generate(seed=0, n=32)
policy = ToyPolicy([s.id for s in scenes])
segmenter = OracleSegmenter()
# a tabular policy needs a far larger step size than a pretrained network
cfg = GrpoConfig(learning_rate=0.05, steps=steps, rollout_batch=64)
trainer = GrpoTrainer(policy, segmenter, scenes, cfg, seed=0)

window = []
for _ in range(steps):
    rec = trainer.train_step()
    s1, s2 = rec["stages"]
    window.append((s1["mean_accuracy"], s2["coarse_iou"], s2["mean_iou"]))
    if rec["step"] % 50 == 0:
        acc, coarse, final = np.mean(window, axis=0)
        print(f"step {rec['step']:4d}  stage-1 acc {acc:.3f}  coarse IoU {coarse:.3f}  final IoU {final:.3f}")
        window = []

records = []
for s in scenes:
    _, final = infer(policy, segmenter, s)
    records.append(EvalRecord(s.id, final, s.gt_mask, s.class_label, s.tier))
for tier, block in summarize(records).items():
    print(f"{tier:<9} cIoU {block['ciou']:.3f}  gIoU {block['giou']:.3f}  F1 {block['f1']:.3f}  n={block['count']}")
