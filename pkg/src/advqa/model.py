"""Encoder + span head as one QA model, batched inference, and checkpoints."""

from __future__ import annotations

import json
from collections import defaultdict
from pathlib import Path
from typing import Sequence

import numpy as np

from .dataio import Chunk, QAExample, chunk_dataset, collate
from .encoder import Encoder, HiddenStates, Vocab
from .heads import DEFAULT_MAX_ANSWER_LEN, HeadKind, SpanPrediction, aggregate_chunks, head_forward, init_head_params
from .numerics import AdamState, ContractError, Tensor, parameter

CHECKPOINT_FORMAT = "advqa-checkpoint"
CHECKPOINT_VERSION = 1


class SpanModel:
    """An encoder (anything satisfying :class:`Encoder`) with a span head on top."""

    def __init__(
        self,
        encoder: Encoder,
        head: HeadKind | str,
        head_params: dict[str, Tensor] | None = None,
        d_model: int | None = None,
        rng: np.random.Generator | None = None,
        activation: str = "gelu",
        condition: str = "logit",
    ):
        self.encoder = encoder
        self.head = HeadKind(head)
        self.activation = activation
        self.condition = condition
        if head_params is None:
            if d_model is None or rng is None:
                raise ContractError("need d_model and rng to initialize head parameters")
            head_params = init_head_params(self.head, d_model, rng)
        self.head_params = head_params

    @property
    def params(self) -> dict[str, Tensor]:
        return {**self.encoder.params, **self.head_params}

    def __call__(self, ids, attention_mask, valid_mask, training: bool = False) -> tuple[HiddenStates, SpanPrediction]:
        hidden = self.encoder.forward(ids, attention_mask, training=training)
        pred = head_forward(self.head, hidden, self.head_params, valid_mask, self.activation, self.condition)
        return hidden, pred


def _batches(items: Sequence, size: int):
    for i in range(0, len(items), size):
        yield items[i : i + size]


def predict_answers(
    model: SpanModel,
    examples: Sequence[QAExample],
    vocab: Vocab,
    max_seq_len: int,
    stride: int,
    batch_size: int = 32,
    max_answer_len: int = DEFAULT_MAX_ANSWER_LEN,
) -> dict[str, str]:
    chunks = chunk_dataset(examples, vocab, max_seq_len, stride)
    rows: dict[str, list] = defaultdict(list)
    for group in _batches(chunks, batch_size):
        batch = collate(group)
        _, pred = model(batch.ids, batch.attention_mask, batch.valid_mask)
        for chunk, row in zip(group, pred.rows()):
            rows[chunk.parent_id].append((chunk, row))
    by_id = {ex.id: ex for ex in examples}
    return {ex_id: aggregate_chunks(preds, by_id[ex_id].context, max_answer_len) for ex_id, preds in rows.items()}


def embed_cls(
    encoder: Encoder,
    examples: Sequence[QAExample],
    vocab: Vocab,
    max_seq_len: int,
    stride: int,
    batch_size: int = 32,
) -> np.ndarray:
    """[CLS] vector of each example's first chunk, shape (n, d)."""
    firsts: list[Chunk] = []
    seen = set()
    for c in chunk_dataset(examples, vocab, max_seq_len, stride):
        if c.parent_id not in seen:
            seen.add(c.parent_id)
            firsts.append(c)
    out = []
    for group in _batches(firsts, batch_size):
        batch = collate(group)
        out.append(encoder.forward(batch.ids, batch.attention_mask).cls.data)
    return np.concatenate(out, axis=0)


# ---------------------------------------------------------------- checkpoints


def save_checkpoint(
    path,
    groups: dict[str, dict[str, Tensor]],
    meta: dict,
    optimizers: dict[str, AdamState] | None = None,
) -> None:
    """Write parameter groups, optimizer moments and a JSON metadata block to one ``.npz``."""
    arrays = {}
    for group, params in groups.items():
        for name, p in params.items():
            arrays[f"param/{group}/{name}"] = p.data
    opt_meta = {}
    for group, st in (optimizers or {}).items():
        opt_meta[group] = {"lr": st.lr, "beta1": st.beta1, "beta2": st.beta2, "eps": st.eps, "t": st.t}
        for name, m in st.m.items():
            arrays[f"adam_m/{group}/{name}"] = m
        for name, v in st.v.items():
            arrays[f"adam_v/{group}/{name}"] = v
    header = {"format": CHECKPOINT_FORMAT, "version": CHECKPOINT_VERSION, "meta": meta, "optimizers": opt_meta}
    arrays["__header__"] = np.frombuffer(json.dumps(header, sort_keys=True).encode("utf-8"), dtype=np.uint8)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path) -> tuple[dict[str, dict[str, Tensor]], dict, dict[str, AdamState]]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"{path}: no such checkpoint")
    with np.load(path, allow_pickle=False) as npz:
        header = json.loads(bytes(npz["__header__"]).decode("utf-8"))
        if header.get("format") != CHECKPOINT_FORMAT:
            raise ContractError(f"{path}: not an {CHECKPOINT_FORMAT} file")
        if header.get("version") != CHECKPOINT_VERSION:
            raise ContractError(f"{path}: unsupported checkpoint version {header.get('version')}")
        groups: dict[str, dict[str, Tensor]] = defaultdict(dict)
        opts = {g: AdamState(**kw) for g, kw in header["optimizers"].items()}
        for key in npz.files:
            if key == "__header__":
                continue
            kind, group, name = key.split("/", 2)
            arr = npz[key]
            if kind == "param":
                groups[group][name] = parameter(arr, name=name)
            elif kind == "adam_m":
                opts[group].m[name] = arr
            elif kind == "adam_v":
                opts[group].v[name] = arr
    return dict(groups), header["meta"], opts
