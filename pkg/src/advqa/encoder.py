"""Word-level tokenizer, vocabulary and a small transformer encoder.

The encoder stands in for a pretrained DistilBERT. Anything that provides a
``params`` dict and a ``forward(ids, attention_mask, training=False)``
returning :class:`HiddenStates` can replace it (see :class:`Encoder`).
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Protocol, Sequence

import numpy as np

from . import numerics as nx
from .numerics import ContractError, NumericError, Tensor

PAD, UNK, CLS, SEP = "[PAD]", "[UNK]", "[CLS]", "[SEP]"
RESERVED = (PAD, UNK, CLS, SEP)
NO_OFFSET = (-1, -1)

_TOKEN_RE = re.compile(r"\w+|[^\w\s]", re.UNICODE)


def tokenize(text: str) -> list[tuple[str, tuple[int, int]]]:
    """Split into lowercased word and punctuation tokens with character offsets.

    >>> [t for t, _ in tokenize("1806-07.")]
    ['1806', '-', '07', '.']
    """
    return [(m.group().lower(), m.span()) for m in _TOKEN_RE.finditer(text)]


class Vocab:
    def __init__(self, tokens: Iterable[str] = ()):
        self.itos: list[str] = list(RESERVED)
        self.stoi: dict[str, int] = {t: i for i, t in enumerate(RESERVED)}
        for tok in tokens:
            self.add(tok)

    def add(self, token: str) -> int:
        if token not in self.stoi:
            self.stoi[token] = len(self.itos)
            self.itos.append(token)
        return self.stoi[token]

    def __len__(self) -> int:
        return len(self.itos)

    def __contains__(self, token: str) -> bool:
        return token in self.stoi

    def id(self, token: str) -> int:
        return self.stoi.get(token, self.stoi[UNK])

    @property
    def pad_id(self) -> int:
        return self.stoi[PAD]

    @property
    def cls_id(self) -> int:
        return self.stoi[CLS]

    @property
    def sep_id(self) -> int:
        return self.stoi[SEP]

    @classmethod
    def build(cls, texts: Iterable[str]) -> "Vocab":
        """Vocabulary over every token of ``texts``, in first-seen order."""
        vocab = cls()
        for text in texts:
            for tok, _ in tokenize(text):
                vocab.add(tok)
        return vocab

    def save(self, path) -> None:
        Path(path).write_text("".join(t + "\n" for t in self.itos), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocab":
        lines = Path(path).read_text(encoding="utf-8").split("\n")
        if lines and lines[-1] == "":
            lines.pop()
        if tuple(lines[:4]) != RESERVED:
            raise ContractError(f"{path}: lines 0-3 must be {RESERVED}")
        vocab = cls()
        for tok in lines[4:]:
            if tok in vocab:
                raise ContractError(f"{path}: duplicate token {tok!r}")
            vocab.add(tok)
        return vocab


@dataclass(frozen=True)
class EncoderConfig:
    vocab_size: int
    n_layers: int = 2
    n_heads: int = 4
    d_model: int = 64
    d_ff: int = 128
    max_seq_len: int = 384
    norm: str = "post"  # or "pre"
    activation: str = "gelu"
    dropout: float = 0.0
    init_std: float = 0.02

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ContractError("d_model must be divisible by n_heads")
        if self.max_seq_len < 16:
            raise ContractError("max_seq_len must be at least 16")
        if self.norm not in ("pre", "post"):
            raise ContractError(f"unknown norm placement {self.norm!r}")


@dataclass
class TokenizedInput:
    ids: np.ndarray
    attention_mask: np.ndarray
    context_range: tuple[int, int]
    offsets: list[tuple[int, int]]

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def valid_mask(self) -> np.ndarray:
        """1 on context positions."""
        m = np.zeros(len(self.ids), dtype=np.int8)
        m[self.context_range[0] : self.context_range[1]] = 1
        return m


def encode_tokens(
    question_tokens: Sequence[tuple[str, tuple[int, int]]],
    context_tokens: Sequence[tuple[str, tuple[int, int]]],
    max_seq_len: int,
    vocab: Vocab,
) -> TokenizedInput:
    """Lay out ``[CLS] q [SEP] c [SEP]`` and pad to ``max_seq_len``."""
    n = len(question_tokens) + len(context_tokens) + 3
    if n > max_seq_len:
        raise ContractError(f"pair needs {n} positions but max_seq_len is {max_seq_len}")
    ids = np.full(max_seq_len, vocab.pad_id, dtype=np.int64)
    mask = np.zeros(max_seq_len, dtype=np.int8)
    ids[0] = vocab.cls_id
    pos = 1
    for tok, _ in question_tokens:
        ids[pos] = vocab.id(tok)
        pos += 1
    ids[pos] = vocab.sep_id
    pos += 1
    begin = pos
    for tok, _ in context_tokens:
        ids[pos] = vocab.id(tok)
        pos += 1
    end = pos
    ids[pos] = vocab.sep_id
    mask[:n] = 1
    offsets = [NO_OFFSET] * max_seq_len
    offsets[begin:end] = [span for _, span in context_tokens]
    return TokenizedInput(ids, mask, (begin, end), offsets)


def encode_pair(question: str, context_slice: str, cfg: EncoderConfig, vocab: Vocab) -> TokenizedInput:
    return encode_tokens(tokenize(question), tokenize(context_slice), cfg.max_seq_len, vocab)


@dataclass
class HiddenStates:
    seq: Tensor  # (B, T, d)
    cls: Tensor  # (B, d), row 0 of seq
    attention_mask: np.ndarray  # (B, T)
    attentions: list[np.ndarray] = field(default_factory=list, repr=False)


class Encoder(Protocol):
    params: dict[str, Tensor]

    def forward(self, ids: np.ndarray, attention_mask: np.ndarray, training: bool = False) -> HiddenStates: ...


def init_encoder_params(cfg: EncoderConfig, rng: np.random.Generator) -> dict[str, Tensor]:
    d, std = cfg.d_model, cfg.init_std
    p: dict[str, np.ndarray] = {
        "enc.tok_emb": rng.normal(0.0, std, (cfg.vocab_size, d)),
        "enc.pos_emb": rng.normal(0.0, std, (cfg.max_seq_len, d)),
        "enc.emb_ln.g": np.ones(d),
        "enc.emb_ln.b": np.zeros(d),
    }
    for i in range(cfg.n_layers):
        pre = f"enc.layer{i}."
        for name in ("q", "k", "v", "o"):
            p[pre + name + ".w"] = rng.normal(0.0, std, (d, d))
            p[pre + name + ".b"] = np.zeros(d)
        p[pre + "ff1.w"] = rng.normal(0.0, std, (d, cfg.d_ff))
        p[pre + "ff1.b"] = np.zeros(cfg.d_ff)
        p[pre + "ff2.w"] = rng.normal(0.0, std, (cfg.d_ff, d))
        p[pre + "ff2.b"] = np.zeros(d)
        for ln in ("ln1", "ln2"):
            p[pre + ln + ".g"] = np.ones(d)
            p[pre + ln + ".b"] = np.zeros(d)
    if cfg.norm == "pre":
        p["enc.final_ln.g"] = np.ones(d)
        p["enc.final_ln.b"] = np.zeros(d)
    return {k: nx.parameter(v, name=k) for k, v in p.items()}


def multi_head_attention(
    x: Tensor,
    attention_mask: np.ndarray,
    params: dict[str, Tensor],
    prefix: str,
    n_heads: int,
) -> tuple[Tensor, np.ndarray]:
    """Scaled dot-product self-attention; masked key columns get exactly zero weight."""
    B, T, d = x.shape
    dh = d // n_heads
    q = nx.linear(x, params[prefix + "q.w"], params[prefix + "q.b"]).reshape(B, T, n_heads, dh)
    k = nx.linear(x, params[prefix + "k.w"], params[prefix + "k.b"]).reshape(B, T, n_heads, dh)
    v = nx.linear(x, params[prefix + "v.w"], params[prefix + "v.b"]).reshape(B, T, n_heads, dh)
    scores = nx.transpose(q, (0, 2, 1, 3)) @ nx.transpose(k, (0, 2, 3, 1))
    scores = nx.masked_fill(scores * (1.0 / math.sqrt(dh)), attention_mask[:, None, None, :] > 0)
    probs = nx.softmax(scores, axis=-1)
    ctx = nx.transpose(probs @ nx.transpose(v, (0, 2, 1, 3)), (0, 2, 1, 3)).reshape(B, T, d)
    return nx.linear(ctx, params[prefix + "o.w"], params[prefix + "o.b"]), probs.data


def encoder_forward(
    ids: np.ndarray,
    attention_mask: np.ndarray,
    params: dict[str, Tensor],
    cfg: EncoderConfig,
    training: bool = False,
    rng: np.random.Generator | None = None,
) -> HiddenStates:
    ids = np.atleast_2d(ids)
    attention_mask = np.atleast_2d(attention_mask)
    B, T = ids.shape
    if T > cfg.max_seq_len:
        raise ContractError(f"sequence length {T} exceeds max_seq_len {cfg.max_seq_len}")
    act = nx.activation(cfg.activation)
    p_drop = cfg.dropout if training and rng is not None else 0.0

    def drop(t):
        return nx.dropout(t, p_drop, rng) if p_drop > 0 else t

    h = nx.embedding(params["enc.tok_emb"], ids) + params["enc.pos_emb"][:T]
    h = drop(nx.layer_norm(h, params["enc.emb_ln.g"], params["enc.emb_ln.b"]))
    attentions = []
    for i in range(cfg.n_layers):
        pre = f"enc.layer{i}."
        try:
            if cfg.norm == "post":
                a, probs = multi_head_attention(h, attention_mask, params, pre, cfg.n_heads)
                h = nx.layer_norm(h + drop(a), params[pre + "ln1.g"], params[pre + "ln1.b"])
                f = nx.linear(act(nx.linear(h, params[pre + "ff1.w"], params[pre + "ff1.b"])), params[pre + "ff2.w"], params[pre + "ff2.b"])
                h = nx.layer_norm(h + drop(f), params[pre + "ln2.g"], params[pre + "ln2.b"])
            else:
                a, probs = multi_head_attention(
                    nx.layer_norm(h, params[pre + "ln1.g"], params[pre + "ln1.b"]),
                    attention_mask, params, pre, cfg.n_heads,
                )
                h = h + drop(a)
                g = nx.layer_norm(h, params[pre + "ln2.g"], params[pre + "ln2.b"])
                f = nx.linear(act(nx.linear(g, params[pre + "ff1.w"], params[pre + "ff1.b"])), params[pre + "ff2.w"], params[pre + "ff2.b"])
                h = h + drop(f)
        except NumericError as err:
            raise NumericError(f"encoder layer {i}: {err}") from err
        attentions.append(probs)
    if cfg.norm == "pre":
        h = nx.layer_norm(h, params["enc.final_ln.g"], params["enc.final_ln.b"])
    return HiddenStates(seq=h, cls=h[:, 0, :], attention_mask=attention_mask, attentions=attentions)


class TransformerEncoder:
    def __init__(
        self,
        cfg: EncoderConfig,
        rng: np.random.Generator | None = None,
        params: dict[str, Tensor] | None = None,
        dropout_rng: np.random.Generator | None = None,
    ):
        if params is None and rng is None:
            raise ContractError("need an rng to initialize parameters")
        self.cfg = cfg
        self.params = params if params is not None else init_encoder_params(cfg, rng)
        self._dropout_rng = dropout_rng

    def forward(self, ids, attention_mask, training: bool = False) -> HiddenStates:
        return encoder_forward(ids, attention_mask, self.params, self.cfg, training, self._dropout_rng)

    def encode(self, inputs: TokenizedInput | Sequence[TokenizedInput]) -> HiddenStates:
        if isinstance(inputs, TokenizedInput):
            inputs = [inputs]
        ids = np.stack([t.ids for t in inputs])
        mask = np.stack([t.attention_mask for t in inputs])
        return self.forward(ids, mask)
