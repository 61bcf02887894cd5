"""Answer-preserving paraphrase augmentation.

Two generators, both keeping the answer text verbatim inside the new context:

* back-translation of a sentence-aligned slice around the answer, filtered by
  a perplexity ratio and skipped when the answer does not survive the round
  trip;
* random replacement of non-answer words by embedding-space neighbours.

Translation, perplexity and neighbour lookup are ports. Stubs live here; real
services can sit behind :class:`SubprocessPort` or :class:`HttpPort`, which
speak one JSON object per line (see :mod:`advqa.portstub` for the reference
server).
"""

from __future__ import annotations

import json
import math
import re
import subprocess
import urllib.error
import urllib.request
from collections import Counter
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Iterable, Mapping, Protocol, Sequence

import numpy as np

from .dataio import Answer, QAExample
from .numerics import ContractError

DIRECTIONS = ("forward", "back")
_SENTENCE_END = ".!?"
_WORD_RE = re.compile(r"\w+", re.UNICODE)


class PortError(RuntimeError):
    """An external augmentation service failed or is unreachable."""


class TranslatorPort(Protocol):
    def translate(self, text: str, direction: str) -> str: ...


class PerplexityPort(Protocol):
    def perplexity(self, text: str) -> float: ...


class EmbeddingPort(Protocol):
    def neighbors(self, word: str, k: int) -> list[tuple[str, float]]: ...


@dataclass(frozen=True)
class AugmentConfig:
    slice_padding_chars: int = 200
    ppl_ratio_max: float = 1.5
    replace_prob: float = 0.1
    neighbor_k: int = 5
    seed: int = 0

    def __post_init__(self):
        if self.ppl_ratio_max < 1:
            raise ContractError("ppl_ratio_max must be at least 1")
        if not 0.0 <= self.replace_prob <= 1.0:
            raise ContractError("replace_prob must lie in [0, 1]")
        if self.neighbor_k < 1:
            raise ContractError("neighbor_k must be positive")
        if self.slice_padding_chars < 0:
            raise ContractError("slice_padding_chars must be non-negative")

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------- stub ports


class IdentityTranslator:
    def translate(self, text: str, direction: str) -> str:
        _check_direction(direction)
        return text


class RewriteTranslator:
    """Applies literal ``(old, new)`` rewrites on the back leg; forward is identity."""

    def __init__(self, rewrites: Sequence[tuple[str, str]]):
        self.rewrites = list(rewrites)

    def translate(self, text: str, direction: str) -> str:
        _check_direction(direction)
        if direction == "back":
            for old, new in self.rewrites:
                text = text.replace(old, new)
        return text


class FunctionTranslator:
    def __init__(self, fn: Callable[[str], str]):
        self.fn = fn

    def translate(self, text: str, direction: str) -> str:
        _check_direction(direction)
        return self.fn(text) if direction == "back" else text


class ConstantPerplexity:
    def __init__(self, value: float = 1.0):
        if value <= 0:
            raise ContractError("perplexity must be positive")
        self.value = value

    def perplexity(self, text: str) -> float:
        return self.value


class UnigramPerplexity:
    """Add-one smoothed word-unigram model; unseen words share one slot."""

    def __init__(self, corpus: Iterable[str]):
        self.counts = Counter(w.lower() for text in corpus for w in _WORD_RE.findall(text))
        self.total = sum(self.counts.values())
        self.vocab = len(self.counts) + 1

    def perplexity(self, text: str) -> float:
        words = [w.lower() for w in _WORD_RE.findall(text)]
        if not words:
            return 1.0
        logp = sum(math.log((self.counts.get(w, 0) + 1) / (self.total + self.vocab)) for w in words)
        return math.exp(-logp / len(words))


class TableNeighbors:
    """Neighbour lists from a dict ``word -> [(neighbour, similarity), ...]``."""

    def __init__(self, table: Mapping[str, Sequence[tuple[str, float]]]):
        self.table = {w: sorted(((n, float(s)) for n, s in ns if n != w), key=lambda t: -t[1]) for w, ns in table.items()}

    def neighbors(self, word: str, k: int) -> list[tuple[str, float]]:
        return self.table.get(word, [])[:k]


class VectorNeighbors:
    """Cosine nearest neighbours over a fixed word-vector table."""

    def __init__(self, words: Sequence[str], vectors: np.ndarray):
        vectors = np.asarray(vectors, dtype=float)
        if len(words) != len(vectors):
            raise ContractError("one vector per word expected")
        norms = np.linalg.norm(vectors, axis=1, keepdims=True)
        self.words = list(words)
        self.index = {w: i for i, w in enumerate(self.words)}
        self.unit = vectors / np.where(norms == 0, 1.0, norms)

    def neighbors(self, word: str, k: int) -> list[tuple[str, float]]:
        i = self.index.get(word)
        if i is None:
            return []
        sims = self.unit @ self.unit[i]
        sims[i] = -np.inf
        order = np.argsort(-sims, kind="stable")[:k]
        return [(self.words[j], float(sims[j])) for j in order if np.isfinite(sims[j])]


def _check_direction(direction: str) -> None:
    if direction not in DIRECTIONS:
        raise ContractError(f"direction must be one of {DIRECTIONS}, got {direction!r}")


# ---------------------------------------------------------------- remote ports


class SubprocessPort:
    """Talks to a long-running child process, one JSON request/response per line.

    Requests: ``{"op": "translate", "text": ..., "direction": ...}``,
    ``{"op": "perplexity", "text": ...}`` or ``{"op": "neighbors", "word": ..., "k": ...}``.
    Responses: ``{"result": ...}`` or ``{"error": "..."}``.
    """

    def __init__(self, argv: Sequence[str], name: str = "subprocess"):
        self.name = name
        try:
            self.proc = subprocess.Popen(
                list(argv), stdin=subprocess.PIPE, stdout=subprocess.PIPE, text=True, encoding="utf-8", bufsize=1
            )
        except OSError as err:
            raise PortError(f"{name}: cannot start {argv[0]!r}: {err}") from err

    def request(self, payload: dict):
        if self.proc.poll() is not None:
            raise PortError(f"{self.name}: service exited with code {self.proc.returncode}")
        try:
            self.proc.stdin.write(json.dumps(payload) + "\n")
            self.proc.stdin.flush()
            line = self.proc.stdout.readline()
        except OSError as err:
            raise PortError(f"{self.name}: {err}") from err
        if not line:
            raise PortError(f"{self.name}: service closed its output")
        return _unwrap(self.name, line)

    def translate(self, text: str, direction: str) -> str:
        return self.request({"op": "translate", "text": text, "direction": direction})

    def perplexity(self, text: str) -> float:
        return float(self.request({"op": "perplexity", "text": text}))

    def neighbors(self, word: str, k: int) -> list[tuple[str, float]]:
        return [(w, float(s)) for w, s in self.request({"op": "neighbors", "word": word, "k": k})]

    def close(self) -> None:
        if self.proc.poll() is None:
            self.proc.stdin.close()
            self.proc.wait(timeout=10)

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


class HttpPort:
    """Same request/response objects, POSTed as JSON to ``url``."""

    def __init__(self, url: str, name: str = "http", timeout: float = 30.0):
        self.url = url
        self.name = name
        self.timeout = timeout

    def request(self, payload: dict):
        req = urllib.request.Request(
            self.url, data=json.dumps(payload).encode("utf-8"), headers={"Content-Type": "application/json"}
        )
        try:
            with urllib.request.urlopen(req, timeout=self.timeout) as resp:
                body = resp.read().decode("utf-8")
        except (urllib.error.URLError, OSError) as err:
            raise PortError(f"{self.name}: {self.url} unreachable: {err}") from err
        return _unwrap(self.name, body)

    translate = SubprocessPort.translate
    perplexity = SubprocessPort.perplexity
    neighbors = SubprocessPort.neighbors


def check_port(port, kind: str) -> None:
    """One cheap request so a dead service fails before any example is processed."""
    name = getattr(port, "name", type(port).__name__)
    try:
        if kind == "translator":
            port.translate("ok .", "forward")
        elif kind == "perplexity":
            port.perplexity("ok .")
        elif kind == "embedder":
            port.neighbors("ok", 1)
        else:
            raise ContractError(f"unknown port kind {kind!r}")
    except PortError as err:
        raise PortError(f"{kind} port unavailable: {err}") from err
    except Exception as err:
        raise PortError(f"{kind} port {name} failed its liveness check: {err}") from err


def _unwrap(name: str, line: str):
    try:
        reply = json.loads(line)
    except json.JSONDecodeError as err:
        raise PortError(f"{name}: malformed reply {line[:80]!r}") from err
    if "error" in reply:
        raise PortError(f"{name}: {reply['error']}")
    if "result" not in reply:
        raise PortError(f"{name}: reply without result")
    return reply["result"]


# ---------------------------------------------------------------- operations


def slice_context(context: str, span: tuple[int, int], padding: int) -> tuple[str, tuple[int, int]]:
    """Cut ``padding`` characters either side of ``span``, widened to sentence boundaries.

    The left cut moves back to just after the nearest ``.``/``!``/``?`` (then
    skips whitespace); the right cut moves forward to include the next one.
    """
    start, end = span
    if not 0 <= start <= end <= len(context):
        raise ContractError(f"span {span} outside a context of length {len(context)}")
    lo = max(0, start - padding)
    hi = min(len(context), end + padding)
    if lo > 0:
        j = lo
        while j > 0 and context[j - 1] not in _SENTENCE_END:
            j -= 1
        while j < start and context[j].isspace():
            j += 1
        lo = j
    if hi < len(context):
        j = hi
        while j < len(context) and context[j - 1] not in _SENTENCE_END:
            j += 1
        hi = j
    return context[lo:hi], (start - lo, end - lo)


def _relocate(text: str, answer: str) -> tuple[int, int] | None:
    i = text.lower().find(answer.lower())
    return None if i < 0 or not answer else (i, i + len(answer))


ACCEPTED = "accepted"
SKIPPED_MORPHED = "skipped_morphed"
SKIPPED_PERPLEXITY = "skipped_perplexity"
ERROR = "error"


def back_translate_outcome(
    example: QAExample, t: TranslatorPort, p: PerplexityPort, cfg: AugmentConfig
) -> tuple[str, QAExample | None]:
    """``(status, example-or-None)``; port failures raise :class:`PortError`."""
    if not example.answers:
        return SKIPPED_MORPHED, None
    primary = example.answers[0]
    piece, _ = slice_context(example.context, (primary.start, primary.end), cfg.slice_padding_chars)
    try:
        new_context = t.translate(t.translate(piece, "forward"), "back")
        new_question = t.translate(t.translate(example.question, "forward"), "back")
        before = p.perplexity(piece + " " + example.question)
        after = p.perplexity(new_context + " " + new_question)
    except PortError:
        raise
    except Exception as err:  # a misbehaving port is an augmentation-source error
        raise PortError(f"{type(t).__name__}/{type(p).__name__}: {err}") from err
    if not (before > 0 and after > 0):
        raise PortError(f"non-positive perplexity ({before}, {after})")
    if after / before > cfg.ppl_ratio_max:
        return SKIPPED_PERPLEXITY, None
    answers = []
    for a in example.answers:
        loc = _relocate(new_context, a.text)
        if loc is None:
            if a is primary:
                return SKIPPED_MORPHED, None
            continue
        answers.append(Answer(new_context[loc[0] : loc[1]], *loc))
    out = replace(
        example, id=f"{example.id}-bt", context=new_context, question=new_question, answers=answers, provenance="augmented"
    )
    return ACCEPTED, out


def back_translate(example: QAExample, t: TranslatorPort, p: PerplexityPort, cfg: AugmentConfig) -> QAExample | None:
    return back_translate_outcome(example, t, p, cfg)[1]


def word_replace(example: QAExample, e: EmbeddingPort, cfg: AugmentConfig, rng: np.random.Generator) -> QAExample:
    """Swap each non-answer context word for a random top-k neighbour with probability ``replace_prob``.

    One uniform draw is consumed per candidate word whatever the outcome, so the
    random stream does not depend on the port's answers.
    """
    spans = [(a.start, a.end) for a in example.answers]
    pieces = []
    cursor = 0
    for m in _WORD_RE.finditer(example.context):
        s, t_end = m.span()
        if any(s < b and a < t_end for a, b in spans):
            continue
        if rng.random() >= cfg.replace_prob:
            continue
        options = [w for w, _ in e.neighbors(m.group(), cfg.neighbor_k) if w != m.group()]
        if not options:
            continue
        pieces.append((s, t_end, options[int(rng.integers(len(options)))]))
    out, shifts = [], []
    for s, t_end, new in pieces:
        out.append(example.context[cursor:s])
        out.append(new)
        shifts.append((t_end, len(new) - (t_end - s)))
        cursor = t_end
    out.append(example.context[cursor:])
    context = "".join(out)

    def moved(pos: int) -> int:
        return pos + sum(d for end, d in shifts if end <= pos)

    answers = [Answer(a.text, moved(a.start), moved(a.start) + len(a.text)) for a in example.answers]
    return replace(example, id=f"{example.id}-wr", context=context, answers=answers, provenance="augmented")


# ---------------------------------------------------------------- pipeline


@dataclass
class AugmentReport:
    inputs: int = 0
    accepted: int = 0
    skipped_morphed: int = 0
    skipped_perplexity: int = 0
    errors: int = 0
    replaced: int = 0
    error_messages: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["error_messages"] = d["error_messages"][:20]
        return d


def example_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(index,)))


def verify_spans(examples: Iterable[QAExample]) -> None:
    for ex in examples:
        for a in ex.answers:
            if ex.context[a.start : a.end] != a.text:
                raise ContractError(f"{ex.id}: answer {a.text!r} not at {a.start}:{a.end}")


def augment_dataset(
    examples: Sequence[QAExample],
    cfg: AugmentConfig,
    translator: TranslatorPort | None = None,
    perplexity: PerplexityPort | None = None,
    embedder: EmbeddingPort | None = None,
) -> tuple[list[QAExample], AugmentReport]:
    """Run back-translation (if both its ports are given) then word replacement (if ``embedder``).

    Output keeps input order. The report's back-translation counts always sum
    to ``inputs`` when back-translation runs.
    """
    report = AugmentReport(inputs=len(examples))
    out: list[QAExample] = []
    for i, ex in enumerate(examples):
        if translator is not None and perplexity is not None:
            try:
                status, new = back_translate_outcome(ex, translator, perplexity, cfg)
            except PortError as err:
                report.errors += 1
                report.error_messages.append(f"{ex.id}: {err}")
                continue
            setattr(report, status, getattr(report, status) + 1)
            if new is not None:
                out.append(new)
        if embedder is not None:
            out.append(word_replace(ex, embedder, cfg, example_rng(cfg.seed, i)))
            report.replaced += 1
    verify_spans(out)
    return out, report
