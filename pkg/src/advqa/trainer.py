"""Adversarial QA training: losses, annealing, alternation and fine-tuning.

The QA model minimizes ``L_QA + lambda1 * w(z) * L_adv`` (plus an optional
Gaussian regularizer on [CLS] vectors); the discriminator separately
minimizes ``L_D``. The two groups have their own Adam states and never
receive each other's gradients.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import numerics as nx
from .dataio import Batch, Chunk, collate
from .discriminator import DiscriminatorConfig, disc_forward, init_disc_params
from .encoder import HiddenStates
from .heads import HeadKind, SpanPrediction
from .model import SpanModel
from .numerics import AdamState, ContractError, NumericError, RunContext, Tape, Tensor

KLD_VARIANCE_FLOOR = 1e-8


@dataclass
class TrainConfig:
    head: str = "mlp"
    adversarial: bool = True  # False trains the plain QA baseline, no discriminator
    disc_input: str = "cls"
    disc_norm: str = "batch"  # "none" feeds the raw vector to the discriminator MLP
    disc_lr: float | None = None  # defaults to lr
    disc_objective: str = "nll"
    anneal: bool = False
    anneal_disc: bool = False  # ablation: also weight L_D by the anneal schedule
    h_kld: bool = False
    lambda1: float = 0.5
    lambda2: float = 0.5
    lambda_kld: float = 0.01
    n_ws: int = 1000
    n_max: int = 250_000
    n_td: int = 1
    n_fd: int = 2
    lr: float = 3e-5
    epochs: int = 3
    batch_size: int = 16
    seed: int = 0
    cmlp_condition: str = "logit"

    def __post_init__(self):
        HeadKind(self.head)
        if self.disc_input not in ("cls", "hidden"):
            raise ContractError(f"disc_input must be cls or hidden, got {self.disc_input!r}")
        if self.disc_objective not in ("nll", "kld"):
            raise ContractError(f"disc_objective must be nll or kld, got {self.disc_objective!r}")
        if not self.n_ws < self.n_max:
            raise ContractError("n_ws must be smaller than n_max")
        if self.n_td < 1 or self.n_fd < 1:
            raise ContractError("n_td and n_fd must be at least 1")
        for name in ("lambda1", "lambda2", "lambda_kld", "lr", "disc_lr"):
            if (getattr(self, name) or 0) < 0:
                raise ContractError(f"{name} must be non-negative")
        if self.batch_size < 1:
            raise ContractError("batch_size must be positive")

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------- losses


def _pick(logp: Tensor, index: np.ndarray) -> Tensor:
    return logp[np.arange(logp.shape[0]), np.asarray(index)]


def qa_loss(pred: SpanPrediction, gold_start, gold_end) -> Tensor:
    """Mean over the batch of -[log P(start) + log P(end)].

    Probabilities are softmaxes over context positions plus the [CLS] slot.
    """
    keep = np.atleast_2d(pred.valid_mask) > 0
    keep = keep.copy()
    keep[:, 0] = True
    gold_start = np.asarray(gold_start)
    gold_end = np.asarray(gold_end)
    rows = np.arange(keep.shape[0])
    if not (keep[rows, gold_start].all() and keep[rows, gold_end].all()):
        raise ContractError("gold position falls outside the context and is not [CLS]")
    log_start = nx.log_softmax(nx.masked_fill(pred.start_logits, keep), axis=-1)
    log_end = nx.log_softmax(nx.masked_fill(pred.end_logits, keep), axis=-1)
    return -(_pick(log_start, gold_start) + _pick(log_end, gold_end)).mean()


def adv_loss(disc_logp: Tensor, objective: str, rng: np.random.Generator) -> Tensor:
    """Loss that rewards a confused discriminator.

    ``nll``: NLL against labels drawn uniformly per example on every call.
    ``kld``: mean KL(P_disc || Uniform(K)).
    """
    n, k = disc_logp.shape
    if k < 2:
        raise ContractError("need at least 2 domains")
    if objective == "nll":
        labels = rng.integers(0, k, size=n)
        return -_pick(disc_logp, labels).mean()
    if objective == "kld":
        return (nx.exp(disc_logp) * disc_logp).sum(axis=-1).mean() + math.log(k)
    raise ContractError(f"unknown adversarial objective {objective!r}")


def disc_loss(disc_logp: Tensor, true_domains, lambda2: float) -> Tensor:
    true_domains = np.asarray(true_domains)
    k = disc_logp.shape[-1]
    if true_domains.min() < 0 or true_domains.max() >= k:
        raise ContractError(f"domain id outside [0, {k})")
    return -_pick(disc_logp, true_domains).mean() * lambda2


def anneal_weight(z: float, n_ws: int, n_max: int) -> float:
    """Heated-tanh weight: about 0.018 at ``n_ws``, 0.5 midway, about 0.982 at ``n_max``.

    Steps past ``n_max`` are clamped to ``n_max``.
    """
    if n_ws >= n_max:
        raise ContractError("n_ws must be smaller than n_max")
    z = min(max(z, 0), n_max)
    return (math.tanh(2.0 * (2 * z - n_max - n_ws) / (n_max - n_ws)) + 1.0) / 2.0


def hidden_kld(cls_batch: Tensor) -> Tensor:
    """Average per-dimension KL of the batch's fitted diagonal Gaussian from N(0, 1).

    Uses the unbiased variance, floored at 1e-8 before the log.
    """
    b = cls_batch.shape[0]
    if b < 2:
        raise ContractError("hidden_kld needs a batch of at least 2")
    mu = cls_batch.mean(axis=0)
    centered = cls_batch - mu
    var = nx.clip_min((centered * centered).sum(axis=0) * (1.0 / (b - 1)), KLD_VARIANCE_FLOOR)
    return ((mu * mu + var - nx.log(var) - 1.0) * 0.5).mean()


# ---------------------------------------------------------------- state


@dataclass
class TrainState:
    model: SpanModel
    qa_opt: AdamState
    ctx: RunContext
    disc_cfg: DiscriminatorConfig | None = None
    disc_params: dict[str, Tensor] | None = None
    disc_opt: AdamState | None = None
    z: int = 0
    history: list[dict] = field(default_factory=list)

    @property
    def qa_params(self) -> dict[str, Tensor]:
        return self.model.params


def init_state(
    model: SpanModel,
    cfg: TrainConfig,
    ctx: RunContext,
    n_domains: int,
    d_model: int,
    disc_init_std: float = 0.02,
) -> TrainState:
    state = TrainState(model=model, qa_opt=AdamState(lr=cfg.lr), ctx=ctx)
    if cfg.adversarial:
        state.disc_cfg = DiscriminatorConfig(
            n_domains=n_domains, d_model=d_model, input_kind=cfg.disc_input, input_norm=cfg.disc_norm
        )
        state.disc_params = init_disc_params(state.disc_cfg, ctx.rng("init"), std=disc_init_std)
        state.disc_opt = AdamState(lr=cfg.lr if cfg.disc_lr is None else cfg.disc_lr)
    return state


def _detached(hidden: HiddenStates) -> HiddenStates:
    return HiddenStates(hidden.seq.detach(), hidden.cls.detach(), hidden.attention_mask)


def train_step(state: TrainState, batch: Batch, cfg: TrainConfig) -> dict:
    """One QA update and, on its schedule, one discriminator update.

    Returns the step's loss record; ``total`` is exactly the objective the QA
    group was differentiated against.
    """
    z = state.z
    use_adv = cfg.adversarial and z % cfg.n_fd == 0
    use_disc = cfg.adversarial and z % cfg.n_td == 0
    w = anneal_weight(z, cfg.n_ws, cfg.n_max) if cfg.anneal else 1.0
    record = {"step": z, "L_QA": None, "L_adv": None, "w": w, "L_D": None, "h_kld": None, "lr": state.qa_opt.lr}
    try:
        with Tape() as tape:
            hidden, pred = state.model(batch.ids, batch.attention_mask, batch.valid_mask, training=True)
            l_qa = qa_loss(pred, batch.gold_start, batch.gold_end)
            total = l_qa
            if use_adv:
                # discriminator weights enter as constants here
                frozen = {k: p.detach() for k, p in state.disc_params.items()}
                l_adv = adv_loss(disc_forward(state.disc_cfg, hidden, frozen), cfg.disc_objective, state.ctx.rng("adversary"))
                total = total + l_adv * (cfg.lambda1 * w)
                record["L_adv"] = l_adv.item()
            if cfg.h_kld:
                l_kld = hidden_kld(hidden.cls)
                total = total + l_kld * cfg.lambda_kld
                record["h_kld"] = l_kld.item()
        params = state.qa_params
        nx.adam_step(params, nx.backward(tape, total, params), state.qa_opt)

        if use_disc:
            with Tape() as dtape:
                logp = disc_forward(state.disc_cfg, _detached(hidden), state.disc_params)
                l_d = disc_loss(logp, batch.domain_ids, cfg.lambda2)
                if cfg.anneal and cfg.anneal_disc:
                    l_d = l_d * w
            nx.adam_step(state.disc_params, nx.backward(dtape, l_d, state.disc_params), state.disc_opt)
            record["L_D"] = l_d.item()
    except NumericError as err:
        raise NumericError(f"training step {z}: {err}") from err
    record["L_QA"] = l_qa.item()
    record["total"] = total.item()
    state.z += 1
    state.history.append(record)
    return record


def iterate_batches(chunks: Sequence[Chunk], batch_size: int, rng: np.random.Generator):
    order = rng.permutation(len(chunks))
    for i in range(0, len(order), batch_size):
        yield collate([chunks[j] for j in order[i : i + batch_size]])


def fit(
    state: TrainState,
    chunks: Sequence[Chunk],
    cfg: TrainConfig,
    epochs: int | None = None,
    log: Callable[[dict], None] | None = None,
    max_steps: int | None = None,
) -> TrainState:
    """Run ``epochs`` shuffled passes over ``chunks`` (or stop after ``max_steps``)."""
    epochs = cfg.epochs if epochs is None else epochs
    steps = 0
    for _ in range(epochs):
        for batch in iterate_batches(chunks, cfg.batch_size, state.ctx.rng("shuffle")):
            if cfg.h_kld and len(batch) < 2:
                continue
            record = train_step(state, batch, cfg)
            if log is not None:
                log(record)
            steps += 1
            if max_steps is not None and steps >= max_steps:
                return state
    return state


def finetune(
    state: TrainState,
    ood_chunks: Sequence[Chunk],
    cfg: TrainConfig,
    epochs: int | None = None,
    log: Callable[[dict], None] | None = None,
) -> TrainState:
    """Continue training on out-of-domain data only; the step counter carries on."""
    if not ood_chunks:
        raise ContractError("fine-tuning needs a non-empty dataset")
    return fit(state, ood_chunks, cfg, epochs, log)


def steps_per_epoch(n_chunks: int, batch_size: int) -> int:
    return -(-n_chunks // batch_size)


def desk_schedule(total_steps: int) -> tuple[int, int]:
    """``(n_ws, n_max)`` rescaled to a short run: warm-up is 0.4% of the run."""
    n_max = max(total_steps, 2)
    n_ws = min(int(round(0.004 * n_max)), n_max - 1)
    return n_ws, n_max


class JsonlLog:
    """Per-step metrics file, one JSON object per line (truncated on open)."""

    def __init__(self, path):
        self.fh = open(path, "w", encoding="utf-8")

    def __call__(self, record: dict) -> None:
        self.fh.write(json.dumps(record, sort_keys=True) + "\n")

    def close(self) -> None:
        self.fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
