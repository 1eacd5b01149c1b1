import pytest
from hypothesis import given
from hypothesis import strategies as st

from refineseg.codec import (
    PromptGroup,
    Stage1Answer,
    Stage2Answer,
    format_completion,
    format_reward,
    parse_completion,
    render_prompt,
)
from refineseg.data import synth_generate
from refineseg.geometry import BBox, Point2D


def test_stage1_schema_literal():
    c = parse_completion('<think>x</think><answer>[{"bbox_2d":[1,2,3,4]}]</answer>', 1)
    assert c.format_valid
    assert c.parsed.boxes == (BBox(1, 2, 3, 4),)
    assert c.think == "x"
    assert format_reward(c) == 1


def test_missing_think_is_invalid():
    c = parse_completion("<answer>[]</answer>", 1)
    assert not c.format_valid and c.parsed is None
    assert format_reward(c) == 0


def test_stage2_points():
    raw = '<think></think><answer>[{"bbox_2d":[0,0,9,9],"points":[[5,5],[6,6]]}]</answer>'
    c = parse_completion(raw, 2)
    assert c.format_valid
    (g,) = c.parsed.groups
    assert g.points == (Point2D(5, 5), Point2D(6, 6))


@pytest.mark.parametrize(
    "raw, stage",
    [
        ('<think></think><answer>[{"bbox_2d":[1,2,3', 1),  # truncated
        ('<think></think><answer>[{"bbox_2d":[1,2,3,4]}]</answer>', 2),  # no points key
        ('<think></think><answer>{"bbox_2d":[1,2,3,4]}</answer>', 1),  # not an array
        ('<think></think><answer>[{"bbox_2d":[1,2,3]}]</answer>', 1),
        ('<think></think><answer>[{"bbox_2d":[1,2,3,"4"]}]</answer>', 1),
        ('<think></think><answer>[{"bbox_2d":[1,2,3,true]}]</answer>', 1),
        ('<think></think><answer>[{"bbox_2d":[1,2,3,NaN]}]</answer>', 1),
        ('<think></think><answer>[{"bbox_2d":[0,0,1,1],"points":[[1]]}]</answer>', 2),
        ('<think></think><answer>[1]</answer>', 1),
        ('<think></think><answer>[]</answer><answer>[]</answer>', 1),
        ('<answer>[]</answer><think></think>', 1),
        ('junk <think></think><answer>[]</answer>', 1),
    ],
)
def test_invalid_formats(raw, stage):
    assert format_reward(parse_completion(raw, stage)) == 0


def test_lenient_parts():
    raw = ' <think>\n</think>\n<answer> [{"bbox_2d":[1.5,2,3,4.25],"label":"x"}] </answer>\n'
    c = parse_completion(raw, 1)
    assert c.format_valid and c.parsed.boxes[0] == BBox(1.5, 2, 3, 4.25)
    assert c.raw_text == raw
    assert format_reward(parse_completion("<think></think><answer>[]</answer>", 1)) == 1


@given(st.binary(max_size=200))
def test_parser_total_on_bytes(data):
    for stage in (1, 2):
        assert format_reward(parse_completion(data, stage)) in (0, 1)


@given(st.text(alphabet=st.sampled_from(list('<>/thinkanswer[]{}",:0123456789bbox_2dpoints ')), max_size=120))
def test_parser_total_on_tag_soup(text):
    for stage in (1, 2):
        assert format_reward(parse_completion(text, stage)) in (0, 1)


nums = st.integers(-100, 100) | st.floats(-100, 100, allow_nan=False).map(lambda x: round(x, 3))
st_boxes = st.builds(lambda *v: BBox(*v).normalized(), nums, nums, nums, nums)
st_points = st.builds(Point2D, nums, nums)


@given(st.lists(st_boxes, max_size=4))
def test_stage1_round_trip(bs):
    ans = Stage1Answer(tuple(bs))
    assert parse_completion(format_completion(ans, "r"), 1).parsed == ans


@given(st.lists(st.builds(PromptGroup, st_boxes, st.lists(st_points, max_size=4).map(tuple)), max_size=4))
def test_stage2_round_trip(gs):
    ans = Stage2Answer(tuple(gs))
    assert parse_completion(format_completion(ans), 2).parsed == ans


class _S:
    instruction = "segment the college"


def test_render_prompt():
    p1 = render_prompt(_S(), 1)
    assert p1.text.count("segment the college") == 1
    assert render_prompt(_S(), 1).text.encode() == p1.text.encode()
    p2 = render_prompt(_S(), 2)
    assert p2.text != p1.text and "coarse mask" in p2.text
    assert '"points"' in p2.text and '"points"' not in p1.text
    with pytest.raises(KeyError):
        render_prompt(_S(), 1, "nope")


def test_render_prompt_for_sample():
    s = synth_generate(0, 1)[0]
    assert s.instruction in render_prompt(s, 1).text
