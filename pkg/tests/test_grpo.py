import math

import numpy as np
import pytest

from refineseg.data import synth_generate
from refineseg.grpo import (
    AdamW,
    GroupRollout,
    GrpoConfig,
    GrpoTrainer,
    clipped_surrogate,
    clipped_surrogate_grad,
    group_advantages,
    run_episode,
    select_best,
    token_kl,
)
from refineseg.policy import ToyPolicy
from refineseg.rewards import RewardBreakdown
from refineseg.segmenter import OracleSegmenter


def test_advantages():
    assert np.allclose(group_advantages([1, 2, 3, 6]), [-2, -1, 0, 3])
    assert np.array_equal(group_advantages([0.4] * 5), np.zeros(5))
    with pytest.raises(ValueError):
        group_advantages([1.0])


def test_surrogate_examples():
    assert clipped_surrogate([2.0], 1.0, 0.5)[0] == pytest.approx(-1.5)
    assert clipped_surrogate([2.0], -1.0, 0.5)[0] == pytest.approx(2.0)
    assert clipped_surrogate([1.0], 0.7, 0.2)[0] == pytest.approx(-0.7)


@pytest.mark.parametrize("r,a", [(2.0, 1.0), (2.0, -1.0), (0.3, 1.0), (0.3, -1.0), (1.1, 0.4), (0.9, -2.0)])
def test_surrogate_grad_matches_finite_difference(r, a):
    h = 1e-6
    lp = math.log(r)
    fd = (clipped_surrogate([math.exp(lp + h)], a, 0.5) - clipped_surrogate([math.exp(lp - h)], a, 0.5)) / (2 * h)
    assert clipped_surrogate_grad([r], a, 0.5)[0] == pytest.approx(fd[0], abs=1e-6)


def test_kl():
    assert token_kl([0.0], [math.log(2)])[0] == pytest.approx(0.306853, abs=1e-6)
    assert token_kl([-1.3], [-1.3])[0] == 0.0
    d = np.linspace(-5, 5, 101)
    assert (token_kl(np.zeros_like(d), d) >= 0).all()


def test_select_best():
    assert select_best([0.1, 0.9, 0.9, 0.2]) == 1
    rng = np.random.default_rng(0)
    draws = [select_best([math.log(3), 0.0], "softmax", rng) for _ in range(100_000)]
    assert np.mean(np.array(draws) == 0) == pytest.approx(0.75, abs=0.006)
    with pytest.raises(ValueError):
        select_best([])
    with pytest.raises(ValueError):
        select_best([1.0], "softmax")


def test_adamw_first_step_is_signed_lr():
    p = np.array([1.0, -1.0, 0.5])
    opt = AdamW(p.shape, lr=0.1)
    opt.step(p, np.array([3.0, -0.2, 0.0]))
    assert np.allclose(p, [0.9, -0.9, 0.5], atol=1e-6)


def test_config_validation():
    assert GrpoConfig().prompts_per_step == 16
    for bad in ({"group_size": 1}, {"clip_eps": 0}, {"selection_mode": "greedy"}, {"kl_weight": -1}):
        with pytest.raises(ValueError):
            GrpoConfig(**bad)


# -- trainer -------------------------------------------------------------


def make_trainer(n=4, seed=0, **cfg):
    ds = synth_generate(7, n)
    pol = ToyPolicy([s.id for s in ds], init_scale=0.3, seed=1)
    base = dict(group_size=4, rollout_batch=8, learning_rate=0.05)
    base.update(cfg)
    return GrpoTrainer(pol, OracleSegmenter(), ds, GrpoConfig(**base), seed=seed)


def group_for(tr, advantages, stage=1):
    s = tr.dataset[0]
    comps = tr.policy.sample_group(s.id, stage, len(advantages), np.random.default_rng(3))
    g = GroupRollout(s.id, stage, comps, [RewardBreakdown(1, 0, 0)] * len(comps), [], [])
    g.advantages = np.asarray(advantages, dtype=float)
    return g


def test_first_update_is_reinforce():
    tr = make_trainer(kl_weight=0.0)
    adv = [1.0, -0.5, 0.25, -0.75]
    g = group_for(tr, adv)
    _, kl, grad = tr.loss_and_grad(g)
    expected = np.zeros_like(grad)
    for tc, a in zip(g.completions, adv):
        _, d = tr.policy.log_prob_and_grad(tc)
        expected -= a * d / len(adv)
    assert kl == 0.0
    assert np.allclose(grad, expected, atol=1e-12)


def test_equal_rewards_leave_params_unchanged():
    tr = make_trainer(kl_weight=0.0)
    before = tr.policy.params.logits.copy()
    tr._update(group_for(tr, [0.0] * 4))
    assert np.array_equal(tr.policy.params.logits, before)


def test_positive_advantage_raises_logp():
    tr = make_trainer()
    g = group_for(tr, [1.5, -0.5, -0.5, -0.5])
    winner = g.completions[0]
    before = tr.policy.token_logp(winner).sum()
    tr._update(g)
    assert tr.policy.token_logp(winner).sum() > before


def test_loss_gradient_finite_difference():
    tr = make_trainer(kl_weight=0.3)
    g = group_for(tr, [0.9, -0.2, -0.4, -0.3])
    # move current away from old/ref so ratio and KL terms are non-trivial
    tr.policy.params.logits += 0.05 * np.random.default_rng(0).standard_normal(tr.policy.params.logits.shape)
    tr.policy.params.logits *= tr.policy.params.valid
    _, _, grad = tr.loss_and_grad(g)
    rng = np.random.default_rng(1)
    h = 1e-6
    for _ in range(20):
        tc = g.completions[rng.integers(4)]
        r = int(rng.choice(tc.rows))
        c = int(rng.choice(np.flatnonzero(tr.policy.params.valid[r])))
        tr.policy.params.logits[r, c] += h
        up = tr.loss_and_grad(g)[0]
        tr.policy.params.logits[r, c] -= 2 * h
        down = tr.loss_and_grad(g)[0]
        tr.policy.params.logits[r, c] += h
        assert grad[r, c] == pytest.approx((up - down) / (2 * h), abs=1e-6)


def test_episode_images_and_shapes():
    tr = make_trainer()
    s = tr.dataset[1]
    seen = []

    class Spy:
        def sample_group(self, ctx, stage, g, rng, temperature, prompt, images):
            seen.append((stage, prompt, [im.copy() for im in images]))
            return tr.policy.sample_group(ctx, stage, g, rng, temperature)

    trace, _, _ = run_episode(Spy(), tr.segmenter, s, tr.cfg, np.random.default_rng(0))
    assert [x[0] for x in seen] == [1, 2]
    assert np.array_equal(seen[0][2][0], s.map) and np.array_equal(seen[0][2][1], s.satellite)
    assert np.array_equal(seen[1][2][0], trace.rendered_map)
    assert np.array_equal(seen[1][2][1], trace.rendered_satellite)
    assert trace.coarse_mask.shape == s.gt_mask.shape
    assert len(trace.stage2.completions) == tr.cfg.group_size


def test_seeded_training_is_reproducible():
    logs = []
    for _ in range(2):
        tr = make_trainer(seed=11)
        logs.append(([tr.train_step() for _ in range(3)], tr.policy.params.logits.copy()))
    assert logs[0][0] == logs[1][0]
    assert np.array_equal(logs[0][1], logs[1][1])


def test_step_record_and_refresh():
    tr = make_trainer()
    rec = tr.train_step()
    assert rec["step"] == 1 and [s["stage"] for s in rec["stages"]] == [1, 2]
    assert {"mean_reward", "mean_accuracy", "mean_iou", "mean_format", "kl", "loss"} <= set(rec["stages"][0])
    assert np.array_equal(tr.old_params.logits, tr.policy.params.logits)
    assert not np.array_equal(tr.ref_params.logits, tr.policy.params.logits)


def test_failed_step_rolls_back():
    tr = make_trainer()
    tr.train_step()
    before = tr.policy.params.logits.copy()
    m, v, t = tr.optimizer.state()

    class Flaky(OracleSegmenter):
        calls = 0

        def segment(self, target, prompts):
            Flaky.calls += 1
            if Flaky.calls > 10:
                raise RuntimeError("segmenter down")
            return super().segment(target, prompts)

    tr.segmenter = Flaky()
    with pytest.raises(RuntimeError):
        tr.train_step()
    assert np.array_equal(tr.policy.params.logits, before)
    m2, v2, t2 = tr.optimizer.state()
    assert np.array_equal(m, m2) and np.array_equal(v, v2) and t == t2
    assert tr.step_count == 1


def test_trainer_rejects_remote_policy():
    with pytest.raises(TypeError):
        GrpoTrainer(object(), OracleSegmenter(), synth_generate(0, 1))
