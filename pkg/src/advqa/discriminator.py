"""Domain classifier over encoder output.

Reads either the [CLS] vector or a masked mean of the whole hidden sequence,
standardizes it per feature over the batch, then applies a two-hidden-layer
MLP and a log-softmax over the K domains. Without the standardization the
encoder can hide domain identity from the MLP simply by shrinking the vector,
while the domains stay linearly separable. Its
parameters are kept apart from the QA model's so the two can be stepped on
their own schedules.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .encoder import HiddenStates
from .numerics import ContractError, Tensor


@dataclass(frozen=True)
class DiscriminatorConfig:
    n_domains: int
    d_model: int
    input_kind: str = "cls"  # or "hidden"
    hidden_sizes: tuple[int, ...] | None = None  # defaults to (d_model, d_model)
    activation: str = "gelu"
    input_norm: str = "batch"  # or "none"

    def __post_init__(self):
        if self.n_domains < 2:
            raise ContractError("a discriminator needs at least 2 domains")
        if self.input_kind not in ("cls", "hidden"):
            raise ContractError(f"unknown discriminator input {self.input_kind!r}")
        if self.input_norm not in ("none", "batch"):
            raise ContractError(f"unknown discriminator input_norm {self.input_norm!r}")

    @property
    def widths(self) -> tuple[int, ...]:
        return self.hidden_sizes if self.hidden_sizes is not None else (self.d_model, self.d_model)


def init_disc_params(cfg: DiscriminatorConfig, rng: np.random.Generator, std: float = 0.02) -> dict[str, Tensor]:
    sizes = (cfg.d_model, *cfg.widths, cfg.n_domains)
    params = {}
    for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
        params[f"disc.fc{i}.w"] = nx.parameter(rng.normal(0.0, std, (a, b)), name=f"disc.fc{i}.w")
        params[f"disc.fc{i}.b"] = nx.parameter(np.zeros(b), name=f"disc.fc{i}.b")
    return params


def pooled_input(cfg: DiscriminatorConfig, hidden: HiddenStates) -> Tensor:
    if cfg.input_kind == "cls":
        return hidden.cls
    mask = np.atleast_2d(hidden.attention_mask).astype(float)
    counts = mask.sum(axis=1, keepdims=True)
    if np.any(counts == 0):
        raise ContractError("hidden-state pooling over a fully masked sequence")
    return nx.sum_(hidden.seq * mask[:, :, None], axis=1) / counts


def batch_standardize(x: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-feature zero mean, unit variance over the batch (differentiable)."""
    centered = x - x.mean(axis=0, keepdims=True)
    var = (centered * centered).mean(axis=0, keepdims=True)
    return centered / nx.exp(nx.log(var + eps) * 0.5)


def disc_forward(cfg: DiscriminatorConfig, hidden: HiddenStates, params: dict[str, Tensor]) -> Tensor:
    """(B, K) domain log-probabilities."""
    act = nx.activation(cfg.activation)
    x = pooled_input(cfg, hidden)
    if cfg.input_norm == "batch":
        x = batch_standardize(x)
    n_layers = len(cfg.widths) + 1
    for i in range(n_layers):
        x = nx.linear(x, params[f"disc.fc{i}.w"], params[f"disc.fc{i}.b"])
        if i < n_layers - 1:
            x = act(x)
    return nx.log_softmax(x, axis=-1)
