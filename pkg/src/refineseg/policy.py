"""Policies over completions.

:class:`ToyPolicy` is a small differentiable stand-in for a vision-language
model. It emits completions from a fixed grammar and exposes exact per-token
log-probabilities and their gradients. :class:`RemoteChatPolicy` talks to a
chat server and returns raw text only, so its completions cannot be trained on.

Toy grammar, stage 1::

    K  (K boxes: x1 y1 x2 y2)

stage 2::

    N  (N groups: x1 y1 x2 y2 n (n points: px py))

Box coordinates are edge indices ``0..g`` on a ``g x g`` grid; point
coordinates are cell indices ``0..g-1`` mapped to cell centers. Every token is
drawn from its own categorical row of logits, selected by context (one per
registered scene key), stage and position. Box rows are shared by both stages.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import httpx
import numpy as np

from .codec import (
    Completion,
    PromptGroup,
    Stage1Answer,
    Stage2Answer,
    format_completion,
    parse_completion,
)
from .geometry import BBox, Point2D
from .pngio import encode_png_b64
from .segmenter import TransportError

__all__ = [
    "ToyPolicyParams",
    "TokenizedCompletion",
    "ToyPolicy",
    "RemoteChatPolicy",
    "log_softmax",
]

log = logging.getLogger(__name__)

TOY_THINK = "grammar-constrained toy policy"


def log_softmax(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    z = logits - logits.max(axis=axis, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=axis, keepdims=True))


@dataclass(frozen=True)
class _Layout:
    n_ctx: int
    max_objects: int
    max_points: int
    grid: int

    @property
    def width(self) -> int:
        return self.grid + 1

    @property
    def rows_per_ctx(self) -> int:
        k, p = self.max_objects, self.max_points
        return 2 + 4 + k + 2 * k * p

    # row offsets within one context block
    def count_row(self, ctx: int, stage: int) -> int:
        return ctx * self.rows_per_ctx + (stage - 1)

    def box_row(self, ctx: int, slot: int, coord: int) -> int:
        # all box slots of a context share one coordinate table
        return ctx * self.rows_per_ctx + 2 + coord

    def npoints_row(self, ctx: int, slot: int) -> int:
        return ctx * self.rows_per_ctx + 6 + slot

    def point_row(self, ctx: int, slot: int, j: int, axis: int) -> int:
        k = self.max_objects
        return ctx * self.rows_per_ctx + 6 + k + 2 * (slot * self.max_points + j) + axis

    def row_sizes(self) -> np.ndarray:
        k, p, g = self.max_objects, self.max_points, self.grid
        block = [k + 1, k + 1] + [g + 1] * 4 + [p + 1] * k + [g] * (2 * k * p)
        return np.tile(np.array(block, dtype=np.int64), self.n_ctx)


@dataclass
class ToyPolicyParams:
    """Logit tables, one padded row per categorical; padding is masked out."""

    logits: np.ndarray  # (n_rows, grid + 1)
    valid: np.ndarray  # bool, same shape

    def copy(self) -> "ToyPolicyParams":
        return ToyPolicyParams(self.logits.copy(), self.valid)

    def masked(self, rows: np.ndarray | None = None) -> np.ndarray:
        if rows is None:
            return np.where(self.valid, self.logits, -np.inf)
        return np.where(self.valid[rows], self.logits[rows], -np.inf)


@dataclass
class TokenizedCompletion:
    ctx: str
    stage: int
    tokens: np.ndarray  # chosen symbol per token
    rows: np.ndarray  # logit row per token
    logp_current: np.ndarray | None = None
    logp_old: np.ndarray | None = None
    logp_ref: np.ndarray | None = None
    text: str = ""
    answer: Stage1Answer | Stage2Answer | None = None

    @property
    def trainable(self) -> bool:
        return self.logp_current is not None

    @property
    def seq_logp(self) -> float:
        return float(np.sum(self.logp_current))

    def completion(self) -> Completion:
        return parse_completion(self.text, self.stage)


class ToyPolicy:
    def __init__(
        self,
        contexts: Sequence[str],
        image_size: int = 64,
        grid: int = 16,
        max_objects: int = 4,
        max_points: int = 4,
        init_scale: float = 0.0,
        seed: int = 0,
    ):
        self.contexts = list(contexts)
        self._index = {c: i for i, c in enumerate(self.contexts)}
        if len(self._index) != len(self.contexts):
            raise ValueError("duplicate context keys")
        self.image_size = image_size
        self.layout = _Layout(len(self.contexts), max_objects, max_points, grid)
        sizes = self.layout.row_sizes()
        valid = np.arange(self.layout.width)[None, :] < sizes[:, None]
        rng = np.random.default_rng(seed)
        logits = init_scale * rng.standard_normal(valid.shape) * valid
        self.params = ToyPolicyParams(logits, valid)

    @property
    def cell(self) -> float:
        return self.image_size / self.layout.grid

    def ctx_index(self, ctx: str) -> int:
        try:
            return self._index[ctx]
        except KeyError:
            raise KeyError(f"context {ctx!r} is not registered with the toy policy") from None

    # -- decoding ---------------------------------------------------------

    def _draw(self, rows: np.ndarray, g: int, rng: np.random.Generator, temperature: float):
        """Draw ``g`` symbols for each row; returns (len(rows), g)."""
        logits = self.params.masked(rows)
        if temperature == 0:
            return np.repeat(np.argmax(logits, axis=1)[:, None], g, axis=1)
        gumbel = rng.gumbel(size=(len(rows), g, logits.shape[1]))
        return np.argmax(logits[:, None, :] / temperature + gumbel, axis=2)

    def sample_group(
        self,
        ctx: str,
        stage: int,
        g: int,
        rng: np.random.Generator,
        temperature: float = 1.0,
        prompt: str = "",
        images: Sequence[np.ndarray] = (),
    ) -> list[TokenizedCompletion]:
        """Draw ``g`` i.i.d. completions. Log-probs are under the untempered policy.

        ``prompt`` and ``images`` are accepted for interface parity and ignored:
        the toy conditions on the context key alone.
        """
        if g < 1:
            raise ValueError("group size must be positive")
        if temperature < 0:
            raise ValueError("temperature must be nonnegative")
        lay = self.layout
        c = self.ctx_index(ctx)
        base = c * lay.rows_per_ctx
        block = np.arange(base, base + lay.rows_per_ctx)
        draws = self._draw(block, g, rng, temperature)  # (rows_per_ctx, g)
        out = []
        for i in range(g):
            col = draws[:, i]
            rows = [lay.count_row(c, stage)]
            n = int(col[rows[0] - base])
            for slot in range(n):
                rows.extend(lay.box_row(c, slot, k) for k in range(4))
                if stage == 2:
                    r = lay.npoints_row(c, slot)
                    rows.append(r)
                    for j in range(int(col[r - base])):
                        rows.append(lay.point_row(c, slot, j, 0))
                        rows.append(lay.point_row(c, slot, j, 1))
            rows_a = np.asarray(rows, dtype=np.int64)
            out.append(self._finish(ctx, stage, col[rows_a - base], rows_a))
        return out

    def _finish(self, ctx: str, stage: int, tokens: np.ndarray, rows: np.ndarray) -> TokenizedCompletion:
        tc = TokenizedCompletion(ctx=ctx, stage=stage, tokens=np.asarray(tokens, dtype=np.int64), rows=rows)
        tc.logp_current = self.token_logp(tc)
        tc.answer = self.decode(tc)
        tc.text = format_completion(tc.answer, TOY_THINK)
        return tc

    def decode(self, tc: TokenizedCompletion) -> Stage1Answer | Stage2Answer:
        cell = self.cell
        toks = tc.tokens.tolist()
        n, pos = toks[0], 1
        boxes, groups = [], []
        for _ in range(n):
            box = BBox.from_list([t * cell for t in toks[pos : pos + 4]])
            pos += 4
            if tc.stage == 1:
                boxes.append(box)
                continue
            m = toks[pos]
            pos += 1
            pts = []
            for _ in range(m):
                pts.append(Point2D((toks[pos] + 0.5) * cell, (toks[pos + 1] + 0.5) * cell))
                pos += 2
            groups.append(PromptGroup(box, tuple(pts)))
        if pos != len(toks):
            raise ValueError("token sequence does not match the grammar")
        return Stage1Answer(tuple(boxes)) if tc.stage == 1 else Stage2Answer(tuple(groups))

    # -- scoring ----------------------------------------------------------

    def _check(self, tc: TokenizedCompletion, params: ToyPolicyParams) -> None:
        rows, toks = tc.rows, tc.tokens
        if len(rows) != len(toks):
            raise ValueError("tokens and rows differ in length")
        if len(rows) and (rows.min() < 0 or rows.max() >= len(params.logits)):
            raise ValueError("token row outside the grammar")
        if len(toks) and (toks.min() < 0 or not params.valid[rows, toks].all()):
            raise ValueError("token symbol outside the grammar")

    def token_logp(self, tc: TokenizedCompletion, params: ToyPolicyParams | None = None) -> np.ndarray:
        params = params or self.params
        self._check(tc, params)
        lp = log_softmax(params.masked(tc.rows))
        return lp[np.arange(len(tc.rows)), tc.tokens]

    def log_prob_and_grad(
        self, tc: TokenizedCompletion, params: ToyPolicyParams | None = None
    ) -> tuple[np.ndarray, np.ndarray]:
        """Per-token log-probs and the gradient of their sum w.r.t. the logits."""
        params = params or self.params
        grad = np.zeros_like(params.logits)
        logp = self.accumulate_grad(tc, np.ones(len(tc.rows)), grad, params)
        return logp, grad

    def accumulate_grad(
        self,
        tc: TokenizedCompletion,
        weights: np.ndarray,
        grad: np.ndarray,
        params: ToyPolicyParams | None = None,
    ) -> np.ndarray:
        """Add ``sum_t weights[t] * d logp_t / d logits`` into ``grad``; returns logp."""
        params = params or self.params
        self._check(tc, params)
        lp = log_softmax(params.masked(tc.rows))
        idx = np.arange(len(tc.rows))
        # d log softmax(z)_c / dz = onehot(c) - softmax(z)
        d = -np.exp(lp)
        d[idx, tc.tokens] += 1.0
        np.add.at(grad, tc.rows, weights[:, None] * d)
        return lp[idx, tc.tokens]


@dataclass
class RemoteChatPolicy:
    """HTTP chat-model client.

    Request: ``{"model", "messages": [{"role": "user", "content": [parts]}],
    "temperature", "max_tokens"}`` with image parts ``{"type": "image",
    "image": <base64 PNG>}`` (map first, then satellite) followed by one text
    part. Response: ``{"text": ...}``.
    """

    url: str
    model: str = "default"
    timeout: float = 60.0
    retries: int = 2
    max_tokens: int = 1024
    transport: httpx.BaseTransport | None = field(default=None, repr=False)

    def __post_init__(self):
        self._client = httpx.Client(timeout=self.timeout, transport=self.transport)

    def close(self) -> None:
        self._client.close()

    def request_body(self, prompt: str, images: Sequence[np.ndarray], temperature: float) -> dict:
        parts: list[dict] = [{"type": "image", "image": encode_png_b64(im)} for im in images]
        parts.append({"type": "text", "text": prompt})
        return {
            "model": self.model,
            "messages": [{"role": "user", "content": parts}],
            "temperature": temperature,
            "max_tokens": self.max_tokens,
        }

    def chat(self, prompt: str, images: Sequence[np.ndarray], temperature: float = 1.0) -> str:
        body = self.request_body(prompt, images, temperature)
        last: Exception | None = None
        for attempt in range(self.retries + 1):
            try:
                resp = self._client.post(self.url, json=body)
                resp.raise_for_status()
                text = resp.json()["text"]
                if not isinstance(text, str):
                    raise TypeError("response text is not a string")
                return text
            except (httpx.HTTPError, KeyError, ValueError, TypeError) as exc:
                last = exc
                log.warning("chat server attempt %d failed: %s", attempt + 1, exc)
        raise TransportError(f"chat server unavailable after {self.retries + 1} attempts") from last

    def sample_group(
        self,
        ctx: str,
        stage: int,
        g: int,
        rng: np.random.Generator | None = None,
        temperature: float = 1.0,
        prompt: str = "",
        images: Sequence[np.ndarray] = (),
    ) -> list[TokenizedCompletion]:
        """``g`` raw completions without log-probs (evaluation only)."""
        out = []
        for _ in range(g):
            text = self.chat(prompt, images, temperature)
            c = parse_completion(text, stage)
            out.append(
                TokenizedCompletion(
                    ctx=ctx,
                    stage=stage,
                    tokens=np.zeros(0, dtype=np.int64),
                    rows=np.zeros(0, dtype=np.int64),
                    text=text,
                    answer=c.parsed,
                )
            )
        return out
