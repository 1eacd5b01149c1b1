"""Prompt rendering and completion parsing.

Wire format of a completion::

    <think>...</think><answer>JSON_ARRAY</answer>

Stage 1 elements are ``{"bbox_2d": [x1, y1, x2, y2]}``; stage 2 elements add
``"points": [[x, y], ...]``.
"""

from __future__ import annotations

import json
import math
import re
from dataclasses import dataclass, field
from importlib import resources
from string import Template
from typing import Union

from .geometry import BBox, Point2D

__all__ = [
    "PromptGroup",
    "Stage1Answer",
    "Stage2Answer",
    "Completion",
    "PromptText",
    "parse_completion",
    "format_reward",
    "serialize_answer",
    "format_completion",
    "render_prompt",
    "TEMPLATE_SETS",
]

TEMPLATE_SETS = ("default",)

_STRUCTURE = re.compile(
    r"\s*<think>(?P<think>.*?)</think>\s*<answer>(?P<answer>.*?)</answer>\s*",
    re.DOTALL,
)
_TAGS = ("<think>", "</think>", "<answer>", "</answer>")


@dataclass(frozen=True)
class PromptGroup:
    box: BBox
    points: tuple[Point2D, ...] = ()


@dataclass(frozen=True)
class Stage1Answer:
    boxes: tuple[BBox, ...]


@dataclass(frozen=True)
class Stage2Answer:
    groups: tuple[PromptGroup, ...]

    @property
    def boxes(self) -> tuple[BBox, ...]:
        return tuple(g.box for g in self.groups)


Answer = Union[Stage1Answer, Stage2Answer]


@dataclass(frozen=True)
class Completion:
    raw_text: str
    stage: int
    think: str | None = None
    answer_json: str | None = None
    parsed: Answer | None = None
    # per-token log-probs are attached by the policy that produced the text
    meta: dict = field(default_factory=dict, compare=False)

    @property
    def format_valid(self) -> bool:
        return self.parsed is not None


@dataclass(frozen=True)
class PromptText:
    text: str
    stage: int


class _SchemaError(ValueError):
    pass


def _number(x) -> float:
    # bool is an int subclass in Python; JSON true/false are not coordinates
    if isinstance(x, bool) or not isinstance(x, (int, float)):
        raise _SchemaError(f"not a number: {x!r}")
    x = float(x)
    if not math.isfinite(x):
        raise _SchemaError("non-finite coordinate")
    return x


def _box(obj: dict) -> BBox:
    coords = obj.get("bbox_2d")
    if not isinstance(coords, list) or len(coords) != 4:
        raise _SchemaError("bbox_2d must be a list of 4 numbers")
    return BBox.from_list([_number(v) for v in coords])


def _points(obj: dict) -> tuple[Point2D, ...]:
    pts = obj.get("points")
    if not isinstance(pts, list):
        raise _SchemaError("points must be a list")
    out = []
    for p in pts:
        if not isinstance(p, list) or len(p) != 2:
            raise _SchemaError("each point must be a pair")
        out.append(Point2D(_number(p[0]), _number(p[1])))
    return tuple(out)


def _reject_constant(name):
    raise _SchemaError(f"invalid JSON constant {name}")


def _parse_answer(text: str, stage: int) -> Answer:
    try:
        data = json.loads(text, parse_constant=_reject_constant)
    except (json.JSONDecodeError, RecursionError) as exc:
        raise _SchemaError(str(exc)) from None
    if not isinstance(data, list):
        raise _SchemaError("answer must be a JSON array")
    if not all(isinstance(obj, dict) for obj in data):
        raise _SchemaError("array elements must be objects")
    if stage == 1:
        return Stage1Answer(tuple(_box(obj) for obj in data))
    return Stage2Answer(tuple(PromptGroup(_box(obj), _points(obj)) for obj in data))


def parse_completion(raw: str | bytes, stage: int) -> Completion:
    """Parse a raw completion. Invalid input yields ``parsed=None``; nothing raises."""
    if stage not in (1, 2):
        raise ValueError(f"stage must be 1 or 2, got {stage!r}")
    if isinstance(raw, (bytes, bytearray)):
        try:
            raw = bytes(raw).decode("utf-8")
        except UnicodeDecodeError:
            return Completion(raw_text=bytes(raw).decode("utf-8", "replace"), stage=stage)
    if any(raw.count(tag) != 1 for tag in _TAGS):
        return Completion(raw_text=raw, stage=stage)
    m = _STRUCTURE.fullmatch(raw)
    if m is None:
        return Completion(raw_text=raw, stage=stage)
    think, answer = m.group("think"), m.group("answer")
    try:
        parsed = _parse_answer(answer, stage)
    except _SchemaError:
        return Completion(raw_text=raw, stage=stage, think=think, answer_json=answer)
    return Completion(raw_text=raw, stage=stage, think=think, answer_json=answer, parsed=parsed)


def format_reward(c: Completion) -> int:
    return 1 if c.format_valid else 0


def _num(x: float):
    return int(x) if float(x).is_integer() else x


def serialize_answer(answer: Answer) -> str:
    """Compact JSON for the answer channel."""
    if isinstance(answer, Stage1Answer):
        objs = [{"bbox_2d": [_num(v) for v in b.to_list()]} for b in answer.boxes]
    else:
        objs = [
            {
                "bbox_2d": [_num(v) for v in g.box.to_list()],
                "points": [[_num(p.x), _num(p.y)] for p in g.points],
            }
            for g in answer.groups
        ]
    return json.dumps(objs, separators=(",", ":"))


def format_completion(answer: Answer, think: str = "") -> str:
    return f"<think>{think}</think><answer>{serialize_answer(answer)}</answer>"


def _load_template(template_set: str, stage: int) -> Template:
    if template_set not in TEMPLATE_SETS:
        raise KeyError(f"unknown template set {template_set!r}")
    path = resources.files("refineseg") / "templates" / template_set / f"stage{stage}.txt"
    return Template(path.read_text(encoding="utf-8"))


def render_prompt(sample, stage: int, template_set: str = "default") -> PromptText:
    """Fill the stage template with ``sample.instruction``."""
    if stage not in (1, 2):
        raise ValueError(f"stage must be 1 or 2, got {stage!r}")
    text = _load_template(template_set, stage).substitute(instruction=sample.instruction)
    return PromptText(text=text, stage=stage)
