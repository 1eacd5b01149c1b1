import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from refineseg.codec import parse_completion
from refineseg.geometry import BBox
from refineseg.rewards import (
    LengthRewardParams,
    point_length_reward,
    point_reward,
    stage1_accuracy_reward,
    stage1_length_reward,
    stage1_reward,
    stage2_reward,
)

BAD = parse_completion("not a completion", 1)


def s1(boxes):
    body = ",".join('{"bbox_2d":[%s]}' % ",".join(str(v) for v in b) for b in boxes)
    return parse_completion(f"<think></think><answer>[{body}]</answer>", 1)


def s2(groups):
    body = ",".join(
        '{"bbox_2d":[%s],"points":[%s]}' % (",".join(map(str, b)), ",".join(f"[{x},{y}]" for x, y in pts))
        for b, pts in groups
    )
    return parse_completion(f"<think></think><answer>[{body}]</answer>", 2)


def test_stage1_length():
    assert stage1_length_reward(3, 3) == 1.0
    assert stage1_length_reward(2, 4) == pytest.approx(0.36787944117144233, abs=1e-12)
    assert stage1_length_reward(0, 1) == pytest.approx(0.1353352832366127, abs=1e-12)
    with pytest.raises(ValueError):
        stage1_length_reward(1, 0)


@given(st.integers(1, 20), st.integers(0, 40), st.integers(0, 40))
def test_stage1_length_monotone(j, k1, k2):
    a, b = stage1_length_reward(k1, j), stage1_length_reward(k2, j)
    if abs(k1 - j) < abs(k2 - j):
        assert a > b
    assert (a == 1.0) == (k1 == j)


def test_stage1_accuracy():
    gt = [BBox(0, 0, 10, 10), BBox(20, 20, 30, 30)]
    assert stage1_accuracy_reward(gt, gt) == 1.0
    assert stage1_accuracy_reward([BBox(0, 0, 10, 10), BBox(50, 50, 60, 60)], gt[:1]) == 0.5
    assert stage1_accuracy_reward([], gt + [BBox(40, 40, 50, 50)]) == 0.0


def test_stage1_reward():
    gt = [BBox(0, 0, 10, 10)]
    assert stage1_reward(BAD, gt).total == 0.0
    assert stage1_reward(s1([[0, 0, 10, 10]]), gt).total == 3.0
    assert stage1_reward(s1([[40, 40, 50, 50]]), gt).total == 2.0
    r = stage1_reward(s1([[0, 0, 10, 10], [40, 40, 50, 50]]), gt)
    assert (r.format, r.accuracy) == (1, 0.5)
    assert r.length == pytest.approx(math.exp(-2))


def test_point_rewards():
    assert point_length_reward([2]) == 1.0
    assert point_length_reward([0]) == pytest.approx(0.6065306597126334, abs=1e-12)
    assert point_length_reward([0, 4]) == pytest.approx(math.exp(-0.5), abs=1e-12)
    assert point_length_reward([]) == 0.0
    assert point_reward(3, LengthRewardParams(mu=3)) == 1.0
    with pytest.raises(ValueError):
        LengthRewardParams(sigma=0)


@given(st.lists(st.integers(0, 10), min_size=1, max_size=6))
def test_point_length_bounded(counts):
    v = point_length_reward(counts)
    assert 0 < v <= 1
    assert (v == 1.0) == all(n == 2 for n in counts)


def test_stage2_reward():
    gt = np.zeros((8, 8), bool)
    gt[2:6, 2:6] = True
    far = np.zeros_like(gt)
    far[0, 0] = True
    ok = s2([([2, 2, 6, 6], [(3, 3), (4, 4)])])
    assert stage2_reward(ok, gt, gt).total == 3.0
    assert stage2_reward(parse_completion("x", 2), gt, gt).total == 0.0
    assert stage2_reward(ok, far, gt).total == 2.0
    with pytest.raises(ValueError):
        stage2_reward(ok, np.zeros((3, 3), bool), gt)


@given(
    st.lists(st.tuples(*[st.integers(0, 30)] * 4), max_size=4),
    st.lists(st.tuples(*[st.integers(0, 30)] * 4), min_size=1, max_size=4),
    st.booleans(),
)
def test_stage1_totals_and_permutation(pred, gt, valid):
    gtb = [BBox.from_list(list(b)) for b in gt]
    c = s1(pred) if valid else BAD
    r = stage1_reward(c, gtb)
    assert r.total == 0.0 or 1.0 <= r.total <= 3.0
    if not valid:
        assert r.total == 0.0
    pb = [BBox.from_list(list(b)) for b in pred]
    assert stage1_accuracy_reward(pb[::-1], gtb[::-1]) == stage1_accuracy_reward(pb, gtb)
