"""Dense tensors with tape-based reverse-mode differentiation, plus Adam.

Every op returns a new :class:`Tensor`. While a :class:`Tape` is open, ops
whose inputs require gradients are appended to it in execution order, which
makes the tape a valid topological order for the reverse sweep.

    with Tape() as tape:
        loss = (x * x).sum()
    grads = backward(tape, loss, {"x": x})
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping

import numpy as np
from scipy.special import erf

# Stand-in for -inf in masked logits; exp() of it underflows to exactly 0.
MASK_VALUE = -1e9

_dtype = np.float64
_tapes: list["Tape"] = []


class ContractError(ValueError):
    """A caller violated an operation's precondition."""


class NumericError(ArithmeticError):
    """An op produced NaN or Inf."""


def set_default_dtype(dtype) -> None:
    global _dtype
    dtype = np.dtype(dtype)
    if dtype not in (np.dtype(np.float64), np.dtype(np.float32)):
        raise ContractError(f"unsupported dtype {dtype}")
    _dtype = dtype.type


def get_default_dtype():
    return _dtype


class Tensor:
    __slots__ = ("data", "requires_grad", "name", "_parents", "_backward", "_op")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=_dtype)
        self.requires_grad = requires_grad
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None
        self._op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        """Same values, cut from the graph."""
        out = Tensor.__new__(Tensor)
        out.data = self.data
        out.requires_grad = False
        out.name = self.name
        out._parents = ()
        out._backward = None
        out._op = "leaf"
        return out

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}, op={self._op})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


class Tape:
    """Records executed ops while open; closed tapes can be differentiated."""

    def __init__(self):
        self.nodes: list[Tensor] = []
        self.open = False

    def __enter__(self) -> "Tape":
        self.open = True
        _tapes.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _tapes.remove(self)
        self.open = False

    def __len__(self) -> int:
        return len(self.nodes)


def _result(op: str, data: np.ndarray, parents: tuple[Tensor, ...], backward) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise NumericError(f"non-finite values produced by {op}")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.name = None
    out._op = op
    tape = _tapes[-1] if _tapes else None
    if tape is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
        tape.nodes.append(out)
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def backward(tape: Tape, output: Tensor, params: Mapping[str, Tensor]) -> dict[str, np.ndarray]:
    """Gradients of scalar ``output`` with respect to each tensor in ``params``.

    Parameters that ``output`` does not depend on get exact zeros.
    """
    if tape.open:
        raise ContractError("tape is still recording; exit the context before backward")
    if output.data.size != 1 or output.ndim != 0:
        raise ContractError(f"backward needs a scalar output, got shape {output.shape}")
    grads: dict[int, np.ndarray] = {}
    if output.requires_grad:
        grads[id(output)] = np.ones_like(output.data)
        for node in reversed(tape.nodes):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
    elif output._op == "leaf" and output.requires_grad:
        grads[id(output)] = np.ones_like(output.data)
    return {
        name: grads.get(id(p), np.zeros_like(p.data)) for name, p in params.items()
    }


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _result(
        "add",
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _result(
        "sub",
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _result(
        "mul",
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data
    return _result(
        "div",
        out,
        (a, b),
        lambda g: (
            _unbroadcast(g / b.data, a.shape),
            _unbroadcast(-g * out / b.data, b.shape),
        ),
    )


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _result("neg", -a.data, (a,), lambda g: (-g,))


def exp(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return _result("exp", out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(divide="ignore", invalid="ignore"):  # reported by the finite check instead
        out = np.log(a.data)
    return _result("log", out, (a,), lambda g: (g / a.data,))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _result("tanh", out, (a,), lambda g: (g * (1.0 - out * out),))


def relu(a) -> Tensor:
    a = as_tensor(a)
    on = a.data > 0
    return _result("relu", a.data * on, (a,), lambda g: (g * on,))


_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(a) -> Tensor:
    """Exact (erf) GELU."""
    a = as_tensor(a)
    x = a.data
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    pdf = _INV_SQRT2PI * np.exp(-0.5 * x * x)
    return _result("gelu", x * cdf, (a,), lambda g: (g * (cdf + x * pdf),))


def activation(name: str) -> Callable[[Tensor], Tensor]:
    if name == "gelu":
        return gelu
    if name == "relu":
        return relu
    raise ContractError(f"unknown activation {name!r}")


def clip_min(a, lo: float) -> Tensor:
    """max(a, lo); the gradient is zero where the floor is active."""
    a = as_tensor(a)
    keep = a.data >= lo
    return _result("clip_min", np.where(keep, a.data, lo), (a,), lambda g: (g * keep,))


def masked_fill(a, mask: np.ndarray, value: float = MASK_VALUE) -> Tensor:
    """Replace entries where ``mask`` is False by ``value`` (broadcasting mask)."""
    a = as_tensor(a)
    keep = np.broadcast_to(np.asarray(mask, dtype=bool), a.shape)
    return _result(
        "masked_fill", np.where(keep, a.data, value), (a,), lambda g: (g * keep,)
    )


def dropout(a, p: float, rng: np.random.Generator) -> Tensor:
    a = as_tensor(a)
    if p <= 0.0:
        return a
    keep = (rng.random(a.shape) >= p) / (1.0 - p)
    return _result("dropout", a.data * keep, (a,), lambda g: (g * keep,))


# ---------------------------------------------------------------- linear algebra


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ContractError("matmul operands need at least 2 dimensions")

    def grad(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _result("matmul", a.data @ b.data, (a, b), grad)


def linear(x, weight, bias=None) -> Tensor:
    out = matmul(x, weight)
    return out if bias is None else add(out, bias)


# ---------------------------------------------------------------- normalizers


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)
    return _result(
        "softmax",
        out,
        (a,),
        lambda g: (out * (g - (g * out).sum(axis=axis, keepdims=True)),),
    )


def log_softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    return _result(
        "log_softmax",
        out,
        (a,),
        lambda g: (g - np.exp(out) * g.sum(axis=axis, keepdims=True),),
    )


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then scale and shift."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    n = x.shape[-1]

    def grad(g):
        dxhat = g * gamma.data
        dx = (inv / n) * (
            n * dxhat
            - dxhat.sum(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).sum(axis=-1, keepdims=True)
        )
        return (
            dx,
            _unbroadcast(g * xhat, gamma.shape),
            _unbroadcast(g, beta.shape),
        )

    return _result("layer_norm", xhat * gamma.data + beta.data, (x, gamma, beta), grad)


# ---------------------------------------------------------------- structure


def concat(tensors: Iterable, axis: int = -1) -> Tensor:
    tensors = tuple(as_tensor(t) for t in tensors)
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]
    return _result(
        "concat",
        np.concatenate([t.data for t in tensors], axis=axis),
        tensors,
        lambda g: tuple(np.split(g, cuts, axis=axis)),
    )


def getitem(a, idx) -> Tensor:
    a = as_tensor(a)

    def grad(g):
        out = np.zeros_like(a.data)
        np.add.at(out, idx, g)
        return (out,)

    return _result("getitem", a.data[idx], (a,), grad)


def embedding(weight, ids) -> Tensor:
    """Row lookup ``weight[ids]`` for an integer array of any shape."""
    weight = as_tensor(weight)
    ids = np.asarray(ids, dtype=np.int64)

    def grad(g):
        out = np.zeros_like(weight.data)
        np.add.at(out, ids.reshape(-1), g.reshape(-1, weight.shape[-1]))
        return (out,)

    return _result("embedding", weight.data[ids], (weight,), grad)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    return _result(
        "reshape", a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),)
    )


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    inverse = None if axes is None else tuple(np.argsort(axes))
    return _result(
        "transpose",
        np.transpose(a.data, axes),
        (a,),
        lambda g: (np.transpose(g, inverse),),
    )


# ---------------------------------------------------------------- reductions


def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)

    def grad(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _result("sum", np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), (a,), grad)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    count = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return mul(sum_(a, axis, keepdims), 1.0 / count)


# ---------------------------------------------------------------- checking


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-5) -> float:
    """Max relative error between tape gradients and central differences.

    Error per coordinate is ``|a - n| / max(1, |a|, |n|)``.
    """
    if not 0.0 < eps <= 1e-2:
        raise ContractError("eps must lie in (0, 1e-2]")
    x = Tensor(x.data, requires_grad=True)
    with Tape() as tape:
        y = f(x)
    if not np.isfinite(y.data).all():
        raise NumericError("f(x) is not finite")
    analytic = backward(tape, y, {"x": x})["x"]

    base = x.data.copy()
    numeric = np.zeros_like(base)
    flat = numeric.reshape(-1)
    for i in range(base.size):
        probe = base.copy().reshape(-1)
        probe[i] += eps
        up = f(Tensor(probe.reshape(base.shape))).item()
        probe[i] -= 2 * eps
        down = f(Tensor(probe.reshape(base.shape))).item()
        flat[i] = (up - down) / (2 * eps)
    scale = np.maximum(1.0, np.maximum(np.abs(analytic), np.abs(numeric)))
    return float(np.max(np.abs(analytic - numeric) / scale))


# ---------------------------------------------------------------- optimizer


@dataclass
class AdamState:
    lr: float = 3e-5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(
    params: Mapping[str, Tensor], grads: Mapping[str, np.ndarray], state: AdamState
) -> tuple[Mapping[str, Tensor], AdamState]:
    """One bias-corrected Adam update; parameter data arrays are replaced, not mutated."""
    # lr == 0 is allowed: it turns a run into a no-op replay.
    if state.lr < 0:
        raise ContractError("learning rate must be non-negative")
    if set(params) != set(grads):
        raise ContractError("params and grads have different keys")
    for name, p in params.items():
        if grads[name].shape != p.shape:
            raise ContractError(f"gradient shape {grads[name].shape} != param shape {p.shape} for {name}")
    state.t += 1
    c1 = 1.0 - state.beta1**state.t
    c2 = 1.0 - state.beta2**state.t
    for name, p in params.items():
        g = grads[name]
        m = state.m.get(name)
        v = state.v.get(name)
        m = (1.0 - state.beta1) * g if m is None else state.beta1 * m + (1.0 - state.beta1) * g
        v = (1.0 - state.beta2) * g * g if v is None else state.beta2 * v + (1.0 - state.beta2) * g * g
        state.m[name] = m
        state.v[name] = v
        p.data = p.data - state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params, state


# ---------------------------------------------------------------- randomness

_STREAMS = {"init": 0, "shuffle": 1, "adversary": 2, "dropout": 3, "augment": 4, "probe": 5}


class RunContext:
    """Owns every random stream of a run, derived from one seed.

    Streams are independent, so drawing adversary labels never shifts the
    shuffle order or the initialization.
    """

    def __init__(self, seed: int):
        self.seed = seed
        self._rngs = {
            name: np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(key,)))
            for name, key in _STREAMS.items()
        }

    def rng(self, stream: str) -> np.random.Generator:
        return self._rngs[stream]
