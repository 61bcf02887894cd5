"""Span prediction heads, span decoding and cross-chunk aggregation.

Three heads share one contract: hidden states in, per-token start and end
logits out.

* ``mlp``  - a single linear map to two outputs per token.
* ``cmlp`` - start logits from an MLP; the end MLP sees each token's hidden
  vector concatenated with that token's start logit.
* ``csat`` - a self-attention layer ``A`` feeds the start MLP; a second,
  separately parameterized self-attention layer runs over ``[seq ; A]`` and
  feeds the end MLP.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from typing import Sequence

import numpy as np

from . import numerics as nx
from .encoder import HiddenStates
from .numerics import ContractError, Tensor

DEFAULT_MAX_ANSWER_LEN = 30


class HeadKind(str, Enum):
    MLP = "mlp"
    CMLP = "cmlp"
    CSAT = "csat"


@dataclass
class SpanPrediction:
    start_logits: Tensor  # (B, T)
    end_logits: Tensor  # (B, T)
    valid_mask: np.ndarray  # (B, T), 1 on context positions

    def rows(self) -> list[tuple[np.ndarray, np.ndarray, np.ndarray]]:
        s, e = np.atleast_2d(self.start_logits.data), np.atleast_2d(self.end_logits.data)
        m = np.atleast_2d(self.valid_mask)
        return [(s[i], e[i], m[i]) for i in range(s.shape[0])]


def _mlp_params(rng, d_in: int, d_hidden: int, prefix: str, std: float) -> dict[str, np.ndarray]:
    return {
        prefix + "fc.w": rng.normal(0.0, std, (d_in, d_hidden)),
        prefix + "fc.b": np.zeros(d_hidden),
        prefix + "out.w": rng.normal(0.0, std, (d_hidden, 1)),
        prefix + "out.b": np.zeros(1),
    }


def _attn_params(rng, d_in: int, d_out: int, prefix: str, std: float) -> dict[str, np.ndarray]:
    p = {}
    for name in ("q", "k", "v"):
        p[prefix + name + ".w"] = rng.normal(0.0, std, (d_in, d_out))
        p[prefix + name + ".b"] = np.zeros(d_out)
    return p


def init_head_params(kind: HeadKind | str, d_model: int, rng: np.random.Generator, std: float = 0.02) -> dict[str, Tensor]:
    kind = HeadKind(kind)
    d = d_model
    if kind is HeadKind.MLP:
        p = {"head.out.w": rng.normal(0.0, std, (d, 2)), "head.out.b": np.zeros(2)}
    elif kind is HeadKind.CMLP:
        p = _mlp_params(rng, d, d, "head.start.", std)
        p.update(_mlp_params(rng, d + 1, d, "head.end.", std))
    else:
        p = _attn_params(rng, d, d, "head.att1.", std)
        p.update(_mlp_params(rng, d, d, "head.start.", std))
        p.update(_attn_params(rng, 2 * d, d, "head.att2.", std))
        p.update(_mlp_params(rng, d, d, "head.end.", std))
    return {k: nx.parameter(v, name=k) for k, v in p.items()}


def _mlp(x: Tensor, params, prefix: str, act) -> Tensor:
    h = act(nx.linear(x, params[prefix + "fc.w"], params[prefix + "fc.b"]))
    out = nx.linear(h, params[prefix + "out.w"], params[prefix + "out.b"])
    return out.reshape(out.shape[:-1])


def _self_attention(x: Tensor, attention_mask: np.ndarray, params, prefix: str) -> Tensor:
    # single head, no output projection
    q = nx.linear(x, params[prefix + "q.w"], params[prefix + "q.b"])
    k = nx.linear(x, params[prefix + "k.w"], params[prefix + "k.b"])
    v = nx.linear(x, params[prefix + "v.w"], params[prefix + "v.b"])
    scores = (q @ nx.transpose(k, (0, 2, 1))) * (1.0 / math.sqrt(q.shape[-1]))
    probs = nx.softmax(nx.masked_fill(scores, attention_mask[:, None, :] > 0), axis=-1)
    return probs @ v


def head_forward(
    kind: HeadKind | str,
    hidden: HiddenStates,
    params: dict[str, Tensor],
    valid_mask: np.ndarray,
    activation: str = "gelu",
    condition: str = "logit",
) -> SpanPrediction:
    """Start/end logits for every position.

    Logits come back unmasked; ``valid_mask`` travels with them and every
    consumer (loss, decoding) restricts to it. ``condition="softmax"`` makes
    ``cmlp`` condition on the start distribution instead of the raw logit.
    """
    try:
        kind = HeadKind(kind)
    except ValueError:
        raise ContractError(f"unknown head kind {kind!r}") from None
    act = nx.activation(activation)
    seq = hidden.seq
    valid_mask = np.atleast_2d(valid_mask)
    if kind is HeadKind.MLP:
        both = nx.linear(seq, params["head.out.w"], params["head.out.b"])
        start, end = both[..., 0], both[..., 1]
    elif kind is HeadKind.CMLP:
        start = _mlp(seq, params, "head.start.", act)
        if condition == "softmax":
            keep = (valid_mask > 0) | (np.arange(start.shape[-1]) == 0)
            channel = nx.softmax(nx.masked_fill(start, keep), axis=-1)
        elif condition == "logit":
            channel = start
        else:
            raise ContractError(f"unknown condition {condition!r}")
        cond = nx.concat([seq, channel.reshape(channel.shape + (1,))], axis=-1)
        end = _mlp(cond, params, "head.end.", act)
    else:
        mask = hidden.attention_mask
        attended = _self_attention(seq, mask, params, "head.att1.")
        start = _mlp(attended, params, "head.start.", act)
        second = _self_attention(nx.concat([seq, attended], axis=-1), mask, params, "head.att2.")
        end = _mlp(second, params, "head.end.", act)
    return SpanPrediction(start, end, valid_mask)


def decode_span(
    start_logits: np.ndarray,
    end_logits: np.ndarray,
    valid_mask: np.ndarray,
    max_answer_len: int = DEFAULT_MAX_ANSWER_LEN,
) -> tuple[int, int, float]:
    """Best ``(s, e, start[s] + end[e])`` over valid pairs with ``0 <= e - s < max_answer_len``.

    Ties go to the smaller ``s``, then the smaller ``e``. With no valid
    position the ``(0, 0)`` pair at the [CLS] index is returned.
    """
    if max_answer_len < 1:
        raise ContractError("max_answer_len must be at least 1")
    start_logits = np.asarray(start_logits, dtype=float)
    end_logits = np.asarray(end_logits, dtype=float)
    idx = np.flatnonzero(np.asarray(valid_mask) > 0)
    if idx.size == 0:
        return 0, 0, float(start_logits[0] + end_logits[0])
    s = idx[:, None]
    e = idx[None, :]
    gap = e - s
    scores = np.where((gap >= 0) & (gap < max_answer_len), start_logits[s] + end_logits[e], -np.inf)
    # argmax scans row-major, so the first maximum has the smallest s, then e
    flat = int(np.argmax(scores))
    i, j = divmod(flat, idx.size)
    return int(idx[i]), int(idx[j]), float(scores[i, j])


def span_text(context: str, offsets: Sequence[tuple[int, int]], start: int, end: int) -> str:
    if offsets[start][0] < 0 or offsets[end][1] < 0:
        return ""
    return context[offsets[start][0] : offsets[end][1]]


def aggregate_chunks(
    preds: Sequence[tuple[object, tuple[np.ndarray, np.ndarray, np.ndarray]]],
    context: str,
    max_answer_len: int = DEFAULT_MAX_ANSWER_LEN,
) -> str:
    """Answer text from the highest-scoring span across all chunks of one example.

    ``preds`` pairs each chunk (anything with ``.inputs.offsets``) with its
    ``(start_logits, end_logits, valid_mask)`` row.
    """
    if not preds:
        raise ContractError("aggregate_chunks needs at least one chunk")
    best = None
    for chunk, (start, end, valid) in preds:
        s, e, score = decode_span(start, end, valid, max_answer_len)
        if best is None or score > best[0]:
            best = (score, chunk, s, e)
    _, chunk, s, e = best
    return span_text(context, chunk.inputs.offsets, s, e)
