"""Two-stage GRPO: localize with boxes, render, refine with boxes and points.

Per sample in a step, stage 1 is sampled, scored and used for one policy
update; the best stage-1 rollout is rendered onto both images and conditions
stage 2, which is sampled, scored and used for a second update. The behavior
policy is refreshed once per step, after all samples.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from .codec import render_prompt
from .data import Dataset, Sample
from .geometry import empty_mask, mask_iou
from .policy import TokenizedCompletion, ToyPolicy, ToyPolicyParams
from .render import OverlayStyle, overlay
from .rewards import LengthRewardParams, RewardBreakdown, stage1_reward, stage2_reward
from .segmenter import PromptSet, Segmenter, segment_groups

__all__ = [
    "GrpoConfig",
    "GroupRollout",
    "EpisodeTrace",
    "AdamW",
    "group_advantages",
    "clipped_surrogate",
    "clipped_surrogate_grad",
    "token_kl",
    "select_best",
    "GrpoTrainer",
    "run_episode",
    "infer",
]


@dataclass
class GrpoConfig:
    group_size: int = 8
    clip_eps: float = 0.5
    kl_weight: float = 0.005
    learning_rate: float = 1e-6
    steps: int = 250
    # completions per step; prompts per step = rollout_batch // group_size
    rollout_batch: int = 128
    selection_mode: str = "argmax"
    temperature: float = 1.0
    adam_betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    weight_decay: float = 0.0
    match_threshold: float = 0.5
    workers: int = 1

    def __post_init__(self):
        self.adam_betas = tuple(self.adam_betas)
        if self.group_size < 2:
            raise ValueError("group_size must be at least 2")
        if not self.clip_eps > 0:
            raise ValueError("clip_eps must be positive")
        if self.kl_weight < 0:
            raise ValueError("kl_weight must be nonnegative")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.selection_mode not in ("argmax", "softmax"):
            raise ValueError(f"unknown selection_mode {self.selection_mode!r}")
        if self.rollout_batch < self.group_size:
            raise ValueError("rollout_batch must hold at least one group")
        if self.workers < 1:
            raise ValueError("workers must be at least 1")

    @property
    def prompts_per_step(self) -> int:
        return self.rollout_batch // self.group_size


def group_advantages(rewards: Sequence[float]) -> np.ndarray:
    r = np.asarray(rewards, dtype=np.float64)
    if r.size < 2:
        raise ValueError("a group needs at least two rewards")
    return r - r.mean()


def clipped_surrogate(ratios, advantage: float, eps: float) -> np.ndarray:
    """Per-token loss -min(r A, clip(r, 1-eps, 1+eps) A)."""
    r = np.asarray(ratios, dtype=np.float64)
    return -np.minimum(r * advantage, np.clip(r, 1.0 - eps, 1.0 + eps) * advantage)


def clipped_surrogate_grad(ratios, advantage: float, eps: float) -> np.ndarray:
    """d/d logp_current of :func:`clipped_surrogate`; zero where the clipped branch is active."""
    r = np.asarray(ratios, dtype=np.float64)
    unclipped = r * advantage <= np.clip(r, 1.0 - eps, 1.0 + eps) * advantage
    return np.where(unclipped, -advantage * r, 0.0)


def token_kl(logp_cur, logp_ref) -> np.ndarray:
    """k3 estimator exp(d) - d - 1 with d = logp_ref - logp_cur; never negative."""
    d = np.asarray(logp_ref, dtype=np.float64) - np.asarray(logp_cur, dtype=np.float64)
    return np.expm1(d) - d


def select_best(rewards: Sequence[float], mode: str = "argmax", rng: np.random.Generator | None = None) -> int:
    r = np.asarray(rewards, dtype=np.float64)
    if r.size == 0:
        raise ValueError("no rewards to select from")
    if mode == "argmax":
        return int(np.argmax(r))  # first maximum
    if mode == "softmax":
        if rng is None:
            raise ValueError("softmax selection needs a random generator")
        p = np.exp(r - r.max())
        return int(rng.choice(r.size, p=p / p.sum()))
    raise ValueError(f"unknown selection mode {mode!r}")


class AdamW:
    """Adaptive-moment update with decoupled weight decay, in place on one array."""

    def __init__(self, shape, lr: float, betas=(0.9, 0.999), eps: float = 1e-8, weight_decay: float = 0.0):
        self.lr, self.betas, self.eps, self.weight_decay = lr, tuple(betas), eps, weight_decay
        self.m = np.zeros(shape)
        self.v = np.zeros(shape)
        self.t = 0

    def step(self, params: np.ndarray, grad: np.ndarray, mask: np.ndarray | None = None) -> None:
        b1, b2 = self.betas
        self.t += 1
        self.m *= b1
        self.m += (1 - b1) * grad
        self.v *= b2
        self.v += (1 - b2) * grad * grad
        m_hat = self.m / (1 - b1**self.t)
        v_hat = self.v / (1 - b2**self.t)
        update = m_hat / (np.sqrt(v_hat) + self.eps)
        if self.weight_decay:
            update = update + self.weight_decay * params
        if mask is not None:
            update = update * mask
        params -= self.lr * update

    def state(self):
        return self.m.copy(), self.v.copy(), self.t

    def restore(self, state) -> None:
        self.m, self.v, self.t = state[0].copy(), state[1].copy(), state[2]


@dataclass
class GroupRollout:
    ctx: str
    stage: int
    completions: list[TokenizedCompletion]
    rewards: list[RewardBreakdown]
    masks: list[np.ndarray]
    ious: list[float]
    baseline: float = 0.0
    advantages: np.ndarray = field(default_factory=lambda: np.zeros(0))

    @property
    def totals(self) -> list[float]:
        return [r.total for r in self.rewards]


@dataclass
class EpisodeTrace:
    sample_id: str
    stage1: GroupRollout
    best: int
    rendered_satellite: np.ndarray
    rendered_map: np.ndarray
    stage2: GroupRollout

    @property
    def coarse_mask(self) -> np.ndarray:
        return self.stage1.masks[self.best]

    @property
    def stage1_boxes(self):
        return self.stage1.completions[self.best].answer.boxes


def _seg_target(segmenter, sample: Sample):
    return sample.scene if getattr(segmenter, "needs_scene", False) else sample.satellite


def _score_stage1(segmenter, sample: Sample, tc: TokenizedCompletion, threshold: float):
    c = tc.completion()
    w, h = sample.width, sample.height
    if c.format_valid and c.parsed.boxes:
        boxes = tuple(b.clamped(w, h) for b in c.parsed.boxes)
        mask = segmenter.segment(_seg_target(segmenter, sample), PromptSet(boxes))
    else:
        mask = empty_mask(w, h)
    return stage1_reward(c, sample.gt_boxes, threshold), mask


def _score_stage2(segmenter, sample: Sample, tc: TokenizedCompletion, params: LengthRewardParams):
    c = tc.completion()
    w, h = sample.width, sample.height
    if c.format_valid:
        mask = segment_groups(segmenter, _seg_target(segmenter, sample), c.parsed.groups, w, h)
    else:
        mask = empty_mask(w, h)
    return stage2_reward(c, mask, sample.gt_mask, params), mask


def _rollout(policy, segmenter, sample: Sample, stage: int, cfg: GrpoConfig, rng, score, extra, pool,
             prompt: str = "", images=()) -> GroupRollout:
    comps = policy.sample_group(
        sample.id, stage, cfg.group_size, rng, cfg.temperature, prompt=prompt, images=images
    )
    fn = lambda tc: score(segmenter, sample, tc, extra)  # noqa: E731
    scored = list(pool.map(fn, comps)) if pool is not None else [fn(tc) for tc in comps]
    rewards = [s[0] for s in scored]
    masks = [s[1] for s in scored]
    ious = [mask_iou(m, sample.gt_mask) for m in masks]
    return GroupRollout(sample.id, stage, comps, rewards, masks, ious)


def run_episode(
    policy,
    segmenter: Segmenter,
    sample: Sample,
    cfg: GrpoConfig,
    rng: np.random.Generator,
    length_params: LengthRewardParams = LengthRewardParams(),
    style: OverlayStyle = OverlayStyle(),
    update: Callable[[GroupRollout], dict] | None = None,
    pool=None,
) -> tuple[EpisodeTrace, dict, dict]:
    """One two-stage episode. ``update`` (if given) is applied after each stage's scoring."""
    prompt1 = render_prompt(sample, 1).text
    g1 = _rollout(policy, segmenter, sample, 1, cfg, rng, _score_stage1, cfg.match_threshold, pool,
                  prompt1, (sample.map, sample.satellite))
    g1.advantages = group_advantages(g1.totals)
    g1.baseline = float(np.mean(g1.totals))
    stats1 = update(g1) if update is not None else {}

    best = select_best(g1.totals, cfg.selection_mode, rng)
    boxes = g1.completions[best].answer.boxes if g1.completions[best].answer is not None else ()
    boxes = tuple(b.clamped(sample.width, sample.height) for b in boxes)
    coarse = g1.masks[best]
    sat_r = overlay(sample.satellite, boxes, coarse, style)
    map_r = overlay(sample.map, boxes, coarse, style)

    prompt2 = render_prompt(sample, 2).text
    g2 = _rollout(policy, segmenter, sample, 2, cfg, rng, _score_stage2, length_params, pool,
                  prompt2, (map_r, sat_r))
    g2.advantages = group_advantages(g2.totals)
    g2.baseline = float(np.mean(g2.totals))
    stats2 = update(g2) if update is not None else {}
    return EpisodeTrace(sample.id, g1, best, sat_r, map_r, g2), stats1, stats2


def infer(
    policy,
    segmenter: Segmenter,
    sample: Sample,
    rng: np.random.Generator | None = None,
    temperature: float = 0.0,
    style: OverlayStyle = OverlayStyle(),
) -> tuple[np.ndarray, np.ndarray]:
    """Single-path prediction: (coarse mask, final mask)."""
    rng = rng if rng is not None else np.random.default_rng(0)
    w, h = sample.width, sample.height
    target = _seg_target(segmenter, sample)
    (tc1,) = policy.sample_group(sample.id, 1, 1, rng, temperature,
                                 prompt=render_prompt(sample, 1).text, images=(sample.map, sample.satellite))
    c1 = tc1.completion()
    boxes = tuple(b.clamped(w, h) for b in c1.parsed.boxes) if c1.format_valid else ()
    coarse = segmenter.segment(target, PromptSet(boxes)) if boxes else empty_mask(w, h)
    images = (overlay(sample.map, boxes, coarse, style), overlay(sample.satellite, boxes, coarse, style))
    (tc2,) = policy.sample_group(sample.id, 2, 1, rng, temperature,
                                 prompt=render_prompt(sample, 2).text, images=images)
    c2 = tc2.completion()
    final = segment_groups(segmenter, target, c2.parsed.groups, w, h) if c2.format_valid else empty_mask(w, h)
    return coarse, final


class GrpoTrainer:
    """Runs the two-stage schedule on a :class:`ToyPolicy`."""

    def __init__(
        self,
        policy: ToyPolicy,
        segmenter: Segmenter,
        dataset: Dataset,
        cfg: GrpoConfig = GrpoConfig(),
        length_params: LengthRewardParams = LengthRewardParams(),
        style: OverlayStyle = OverlayStyle(),
        seed: int = 0,
    ):
        if not isinstance(policy, ToyPolicy):
            raise TypeError("training needs a policy with per-token log-probs (ToyPolicy)")
        if len(dataset) == 0:
            raise ValueError("empty training set")
        self.policy = policy
        self.segmenter = segmenter
        self.dataset = dataset
        self.cfg = cfg
        self.length_params = length_params
        self.style = style
        self.seed = seed
        self.ref_params: ToyPolicyParams = policy.params.copy()  # frozen at step 0
        self.old_params: ToyPolicyParams = policy.params.copy()
        self.optimizer = AdamW(
            policy.params.logits.shape, cfg.learning_rate, cfg.adam_betas, cfg.adam_eps, cfg.weight_decay
        )
        self.step_count = 0
        self._pool = ThreadPoolExecutor(cfg.workers) if cfg.workers > 1 else None

    def close(self) -> None:
        if self._pool is not None:
            self._pool.shutdown()

    def loss_and_grad(self, group: GroupRollout) -> tuple[float, float, np.ndarray]:
        """Clipped surrogate plus beta * KL for one group: (loss, kl, grad w.r.t. logits).

        Tokens are summed within a completion and completions averaged over the group.
        """
        cfg, pol = self.cfg, self.policy
        g = len(group.completions)
        grad = np.zeros_like(pol.params.logits)
        loss = kl = 0.0
        for tc, adv in zip(group.completions, group.advantages):
            lp_cur = pol.token_logp(tc)
            lp_old = pol.token_logp(tc, self.old_params)
            lp_ref = pol.token_logp(tc, self.ref_params)
            tc.logp_old, tc.logp_ref = lp_old, lp_ref
            ratio = np.exp(lp_cur - lp_old)
            k3 = token_kl(lp_cur, lp_ref)
            loss += clipped_surrogate(ratio, adv, cfg.clip_eps).sum() / g
            kl += k3.sum() / g
            # d k3 / d logp_cur = 1 - exp(logp_ref - logp_cur)
            weights = clipped_surrogate_grad(ratio, adv, cfg.clip_eps) / g
            weights = weights - cfg.kl_weight * np.expm1(lp_ref - lp_cur) / g
            pol.accumulate_grad(tc, weights, grad)
        return loss + cfg.kl_weight * kl, kl, grad

    def _update(self, group: GroupRollout) -> dict:
        loss, kl, grad = self.loss_and_grad(group)
        self.optimizer.step(self.policy.params.logits, grad, self.policy.params.valid)
        return {"loss": loss, "kl": kl}

    def batch_indices(self, rng: np.random.Generator) -> np.ndarray:
        n = len(self.dataset)
        return rng.choice(n, size=min(self.cfg.prompts_per_step, n), replace=False)

    def train_step(self, batch: Sequence[Sample] | None = None) -> dict:
        """One outer step of the schedule; returns the metrics record.

        A failure anywhere in the step restores parameters and optimizer state.
        """
        step = self.step_count + 1
        rng = np.random.default_rng([self.seed, step])
        if batch is None:
            batch = [self.dataset[i] for i in self.batch_indices(rng)]
        saved = (self.policy.params.logits.copy(), self.optimizer.state())
        acc: dict[int, dict[str, list[float]]] = {1: {}, 2: {}}
        try:
            for sample in batch:
                trace, s1, s2 = run_episode(
                    self.policy, self.segmenter, sample, self.cfg, rng,
                    self.length_params, self.style, self._update, self._pool,
                )
                for stage, group, stats in ((1, trace.stage1, s1), (2, trace.stage2, s2)):
                    rec = acc[stage]
                    rec.setdefault("mean_reward", []).append(float(np.mean(group.totals)))
                    rec.setdefault("mean_accuracy", []).append(float(np.mean([r.accuracy for r in group.rewards])))
                    rec.setdefault("mean_iou", []).append(float(np.mean(group.ious)))
                    rec.setdefault("mean_format", []).append(float(np.mean([r.format for r in group.rewards])))
                    rec.setdefault("kl", []).append(stats["kl"])
                    rec.setdefault("loss", []).append(stats["loss"])
                acc[2].setdefault("coarse_iou", []).append(trace.stage1.ious[trace.best])
        except Exception:
            self.policy.params.logits[...] = saved[0]
            self.optimizer.restore(saved[1])
            raise
        self.old_params = self.policy.params.copy()
        self.step_count = step
        return {
            "step": step,
            "stages": [
                {"stage": stage, **{k: float(np.mean(v)) for k, v in acc[stage].items()}}
                for stage in (1, 2)
            ],
        }

    def config_dict(self) -> dict:
        return asdict(self.cfg)
