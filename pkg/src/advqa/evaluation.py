"""Answer metrics and embedding-space domain-gap analysis."""

from __future__ import annotations

import csv
import json
import re
import string
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.optimize import minimize

from .numerics import ContractError

_ARTICLES = re.compile(r"\b(a|an|the)\b")
_PUNCT = set(string.punctuation)


def normalize_answer(text: str) -> str:
    """Lowercase, drop punctuation and articles, collapse whitespace."""
    text = "".join(ch for ch in text.lower() if ch not in _PUNCT)
    return " ".join(_ARTICLES.sub(" ", text).split())


def exact_match(pred: str, golds: Sequence[str]) -> int:
    if not golds:
        raise ContractError("exact_match needs at least one gold answer")
    p = normalize_answer(pred)
    return int(any(p == normalize_answer(g) for g in golds))


def _f1_single(pred: str, gold: str) -> float:
    p = normalize_answer(pred).split()
    g = normalize_answer(gold).split()
    if not p and not g:
        return 1.0
    if not p or not g:
        return 0.0
    same = sum((Counter(p) & Counter(g)).values())
    if same == 0:
        return 0.0
    precision = same / len(p)
    recall = same / len(g)
    return 2 * precision * recall / (precision + recall)


def f1(pred: str, golds: Sequence[str]) -> float:
    """Token-overlap F1, max over gold answers."""
    if not golds:
        raise ContractError("f1 needs at least one gold answer")
    return max(_f1_single(pred, g) for g in golds)


@dataclass
class MetricReport:
    per_dataset: dict[str, dict[str, float]]  # name -> {"f1", "em", "count"}
    aggregate: dict[str, float]

    def to_dict(self) -> dict:
        return {
            "per_dataset": {
                k: {"f1": round(v["f1"], 2), "em": round(v["em"], 2), "count": int(v["count"])}
                for k, v in self.per_dataset.items()
            },
            "aggregate": {
                "f1": round(self.aggregate["f1"], 2),
                "em": round(self.aggregate["em"], 2),
                "count": int(self.aggregate["count"]),
            },
        }


def score_predictions(
    predictions: dict[str, str],
    golds: dict[str, Sequence[str]],
    dataset_of: dict[str, str],
) -> MetricReport:
    """F1/EM (0-100) per dataset and example-weighted overall.

    Missing predictions count as empty strings.
    """
    sums: dict[str, list[float]] = {}
    for ex_id, answers in golds.items():
        pred = predictions.get(ex_id, "")
        acc = sums.setdefault(dataset_of[ex_id], [0.0, 0.0, 0])
        acc[0] += f1(pred, answers)
        acc[1] += exact_match(pred, answers)
        acc[2] += 1
    per = {k: {"f1": 100.0 * s[0] / s[2], "em": 100.0 * s[1] / s[2], "count": s[2]} for k, s in sums.items()}
    total = sum(v["count"] for v in per.values())
    if total == 0:
        agg = {"f1": 0.0, "em": 0.0, "count": 0}
    else:
        agg = {
            "f1": sum(v["f1"] * v["count"] for v in per.values()) / total,
            "em": sum(v["em"] * v["count"] for v in per.values()) / total,
            "count": total,
        }
    return MetricReport(per, agg)


# ---------------------------------------------------------------- domain probe


def _fit_softmax_regression(x: np.ndarray, y: np.ndarray, n_classes: int, l2: float = 1e-3) -> np.ndarray:
    n, d = x.shape
    xb = np.hstack([x, np.ones((n, 1))])
    onehot = np.eye(n_classes)[y]

    def objective(flat):
        w = flat.reshape(d + 1, n_classes)
        z = xb @ w
        z = z - z.max(axis=1, keepdims=True)
        logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
        loss = -(onehot * logp).sum() / n + 0.5 * l2 * (w[:-1] ** 2).sum()
        grad = xb.T @ (np.exp(logp) - onehot) / n
        grad[:-1] += l2 * w[:-1]
        return loss, grad.ravel()

    res = minimize(objective, np.zeros((d + 1) * n_classes), jac=True, method="L-BFGS-B", options={"maxiter": 500})
    return res.x.reshape(d + 1, n_classes)


def probe_domain_accuracy(
    embeddings: np.ndarray,
    labels: Sequence[int],
    split_seed: int = 0,
    train_fraction: float = 0.7,
) -> float:
    """Held-out accuracy of a softmax-regression probe trained on frozen embeddings.

    The split is stratified per class so every domain appears on both sides.
    """
    x = np.asarray(embeddings, dtype=float)
    y = np.asarray(labels)
    classes, y_idx = np.unique(y, return_inverse=True)
    if len(classes) < 2:
        raise ContractError("probe needs at least 2 domains")
    rng = np.random.default_rng(split_seed)
    train_idx, test_idx = [], []
    for c in range(len(classes)):
        members = np.flatnonzero(y_idx == c)
        if len(members) < 2:
            raise ContractError(f"domain {classes[c]} has fewer than 2 samples")
        members = rng.permutation(members)
        k = min(max(1, int(round(train_fraction * len(members)))), len(members) - 1)
        train_idx.extend(members[:k])
        test_idx.extend(members[k:])
    train_idx, test_idx = np.array(train_idx), np.array(test_idx)
    mu = x[train_idx].mean(axis=0)
    sd = x[train_idx].std(axis=0)
    sd[sd < 1e-12] = 1.0
    z = (x - mu) / sd
    w = _fit_softmax_regression(z[train_idx], y_idx[train_idx], len(classes))
    scores = np.hstack([z[test_idx], np.ones((len(test_idx), 1))]) @ w
    return float(np.mean(scores.argmax(axis=1) == y_idx[test_idx]))


# ---------------------------------------------------------------- projections


def pca_2d(x: np.ndarray) -> np.ndarray:
    """Top-2 principal coordinates; each axis is signed so its largest-magnitude loading is positive."""
    x = np.asarray(x, dtype=float)
    if x.ndim != 2 or x.shape[0] < 3:
        raise ContractError("pca needs an (n >= 3, d) matrix")
    xc = x - x.mean(axis=0)
    cov = xc.T @ xc / (x.shape[0] - 1)
    evals, evecs = np.linalg.eigh(cov)
    if evals[-1] <= 1e-12 * max(1.0, np.abs(x).max()):
        raise ContractError("pca on rank-0 data")
    order = np.argsort(evals)[::-1][:2]
    comps = evecs[:, order]
    if comps.shape[1] < 2:
        comps = np.hstack([comps, np.zeros((x.shape[1], 2 - comps.shape[1]))])
    for j in range(comps.shape[1]):
        k = np.argmax(np.abs(comps[:, j]))
        if comps[k, j] < 0:
            comps[:, j] = -comps[:, j]
    return xc @ comps


def _sq_dists(x: np.ndarray) -> np.ndarray:
    s = (x * x).sum(axis=1)
    d = s[:, None] + s[None, :] - 2.0 * x @ x.T
    np.fill_diagonal(d, 0.0)
    return np.maximum(d, 0.0)


def _conditional_p(d2: np.ndarray, perplexity: float, tol: float = 1e-5, max_iter: int = 100) -> np.ndarray:
    """Row-wise Gaussian affinities whose entropy matches log(perplexity)."""
    n = d2.shape[0]
    target = np.log(perplexity)
    p = np.zeros((n, n))
    for i in range(n):
        di = np.delete(d2[i], i)
        lo, hi, beta = 0.0, np.inf, 1.0
        for _ in range(max_iter):
            w = np.exp(-(di - di.min()) * beta)
            sw = w.sum()
            h = np.log(sw) + beta * ((di - di.min()) * w).sum() / sw
            if abs(h - target) < tol:
                break
            if h > target:
                lo = beta
                beta = beta * 2 if hi == np.inf else (beta + hi) / 2
            else:
                hi = beta
                beta = (beta + lo) / 2
        p[i, np.arange(n) != i] = w / sw
    return p


def tsne_2d(
    x: np.ndarray,
    perplexity: float = 30.0,
    n_iter: int = 1000,
    seed: int = 0,
    learning_rate: float = 200.0,
    exaggeration: float = 12.0,
    exaggeration_iters: int = 250,
    checkpoint_every: int = 50,
) -> tuple[np.ndarray, list[tuple[int, float]]]:
    """Exact t-SNE. Returns coordinates and ``(iteration, KL)`` checkpoints.

    Checkpoints start once early exaggeration ends: before that the optimizer
    follows the scaled affinities, so the true KL is not its objective. A
    checkpoint whose KL exceeds the best so far restarts from the best point
    with momentum cleared and half the step, so recorded KL never rises.
    """
    x = np.asarray(x, dtype=float)
    n = x.shape[0]
    if n < 3:
        raise ContractError("tsne needs at least 3 points")
    if n > 5000:
        raise ContractError("exact tsne is limited to 5000 points")
    d2 = _sq_dists(x)
    if d2.max() <= 0:
        raise ContractError("tsne on rank-0 data")
    perplexity = min(perplexity, (n - 1) / 3.0)
    cond = _conditional_p(d2, perplexity)
    p = (cond + cond.T) / (2.0 * n)
    p = np.maximum(p, 1e-12)
    rng = np.random.default_rng(seed)
    y = rng.normal(0.0, 1e-4, (n, 2))
    update = np.zeros_like(y)
    gains = np.ones_like(y)
    checkpoints = []
    mask = ~np.eye(n, dtype=bool)
    best = (y, np.inf)
    for it in range(1, n_iter + 1):
        num = 1.0 / (1.0 + _sq_dists(y))
        np.fill_diagonal(num, 0.0)
        q = np.maximum(num / num.sum(), 1e-12)
        scale = exaggeration if it <= exaggeration_iters else 1.0
        pq = (scale * p - q) * num
        grad = 4.0 * (np.diag(pq.sum(axis=1)) - pq) @ y
        momentum = 0.5 if it <= exaggeration_iters else 0.8
        same_sign = np.sign(grad) == np.sign(update)
        gains = np.where(same_sign, gains * 0.8, gains + 0.2).clip(min=0.01)
        update = momentum * update - learning_rate * gains * grad
        y = y + update
        y = y - y.mean(axis=0)
        if it > exaggeration_iters and (it % checkpoint_every == 0 or it == n_iter):
            num = 1.0 / (1.0 + _sq_dists(y))
            np.fill_diagonal(num, 0.0)
            q = np.maximum(num / num.sum(), 1e-12)
            kl = float(np.sum(p[mask] * np.log(p[mask] / q[mask])))
            if kl > best[1]:
                # momentum overshot: restart from the best point with a smaller step
                y = best[0].copy()
                update[:] = 0.0
                gains[:] = 1.0
                learning_rate *= 0.5
                kl = best[1]
            else:
                best = (y.copy(), kl)
            checkpoints.append((it, kl))
    return y, checkpoints


def project_2d(embeddings: np.ndarray, method: str = "pca", **params) -> np.ndarray:
    if method == "pca":
        return pca_2d(embeddings)
    if method == "tsne":
        return tsne_2d(embeddings, **params)[0]
    raise ContractError(f"unknown projection {method!r}")


def silhouette(x: np.ndarray, labels: Sequence[int]) -> float:
    """Mean silhouette coefficient with Euclidean distances."""
    x = np.asarray(x, dtype=float)
    labels = np.asarray(labels)
    classes = np.unique(labels)
    if len(classes) < 2:
        raise ContractError("silhouette needs at least 2 labels")
    dist = np.sqrt(_sq_dists(x))
    s = np.zeros(len(x))
    for i in range(len(x)):
        own = labels == labels[i]
        n_own = own.sum() - 1
        if n_own == 0:
            continue
        a = dist[i, own].sum() / n_own
        b = min(dist[i, labels == c].mean() for c in classes if c != labels[i])
        s[i] = (b - a) / max(a, b) if max(a, b) > 0 else 0.0
    return float(s.mean())


@dataclass
class GapReport:
    probe_accuracy: float
    silhouette: float
    coords: np.ndarray = field(repr=False)
    labels: np.ndarray = field(repr=False)
    ids: list[str] = field(default_factory=list, repr=False)
    method: str = "pca"

    def summary(self) -> dict:
        return {
            "probe_accuracy": round(self.probe_accuracy, 4),
            "silhouette": round(self.silhouette, 4),
            "method": self.method,
            "n": int(len(self.labels)),
        }


def domain_gap(
    embeddings: np.ndarray,
    labels: Sequence[int],
    ids: Sequence[str] | None = None,
    method: str = "pca",
    seed: int = 0,
    **params,
) -> GapReport:
    labels = np.asarray(labels)
    coords = project_2d(embeddings, method, seed=seed, **params) if method == "tsne" else project_2d(embeddings, method)
    return GapReport(
        probe_accuracy=probe_domain_accuracy(embeddings, labels, split_seed=seed),
        silhouette=silhouette(coords, labels),
        coords=coords,
        labels=labels,
        ids=list(ids) if ids is not None else [str(i) for i in range(len(labels))],
        method=method,
    )


def write_coordinates(path, report: GapReport, domain_names: Sequence[str] | None = None) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["id", "x", "y", "domain"])
        for ex_id, (x, y), lab in zip(report.ids, report.coords, report.labels):
            name = domain_names[lab] if domain_names is not None else int(lab)
            w.writerow([ex_id, f"{x:.6f}", f"{y:.6f}", name])


_COLORS = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f"]


def write_svg(path, report: GapReport, domain_names: Sequence[str] | None = None, size: int = 480) -> None:
    """Scatter plot of the 2-D coordinates, one color per domain."""
    c = report.coords
    lo, hi = c.min(axis=0), c.max(axis=0)
    span = np.where(hi - lo > 0, hi - lo, 1.0)
    pad = 30
    xy = pad + (c - lo) / span * (size - 2 * pad)
    lines = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size + 20 * 8}">']
    lines.append(f'<rect width="{size}" height="{size}" fill="white" stroke="#ccc"/>')
    for (x, y), lab in zip(xy, report.labels):
        lines.append(f'<circle cx="{x:.1f}" cy="{size - y:.1f}" r="3" fill="{_COLORS[lab % len(_COLORS)]}" fill-opacity="0.7"/>')
    for k, lab in enumerate(np.unique(report.labels)):
        name = domain_names[lab] if domain_names is not None else str(lab)
        yy = size + 15 + 18 * k
        lines.append(f'<circle cx="15" cy="{yy - 4}" r="4" fill="{_COLORS[lab % len(_COLORS)]}"/>')
        lines.append(f'<text x="25" y="{yy}" font-size="12" font-family="sans-serif">{name}</text>')
    lines.append("</svg>")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def write_report(path, payload: dict) -> None:
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")
