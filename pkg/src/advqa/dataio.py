"""QA records, dataset files, sliding-window chunking and a synthetic corpus.

Dataset files are UTF-8 JSON lines, one record per (context, question):

    {"id": "...", "context": "...", "question": "...",
     "answers": [{"text": "...", "char_span": [start, end]}], "split": "train"}

``char_span`` is half-open. Each file is one domain. A manifest (JSON) lists
the files; domain ids follow manifest order:

    {"datasets": [{"name": "squad", "path": "squad.jsonl", "role": "in"},
                  {"name": "race", "path": "race.jsonl", "role": "ood"}]}
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .encoder import TokenizedInput, Vocab, encode_tokens, tokenize
from .numerics import ContractError

SPLITS = ("train", "val", "test")


class DataError(Exception):
    """Unreadable or malformed dataset input."""


@dataclass(frozen=True)
class Answer:
    text: str
    start: int
    end: int


@dataclass
class QAExample:
    id: str
    context: str
    question: str
    answers: list[Answer]
    domain_id: int = 0
    split: str = "train"
    provenance: str = "original"

    def check(self) -> None:
        for a in self.answers:
            if not (0 <= a.start <= a.end <= len(self.context)) or self.context[a.start : a.end] != a.text:
                raise ValueError(f"{self.id}: answer {a.text!r} does not match context span {a.start}:{a.end}")
        if self.split == "train" and not self.answers:
            raise ValueError(f"{self.id}: train example without answers")

    def to_record(self) -> dict:
        rec = {
            "id": self.id,
            "context": self.context,
            "question": self.question,
            "answers": [{"text": a.text, "char_span": [a.start, a.end]} for a in self.answers],
            "split": self.split,
        }
        if self.provenance != "original":
            rec["provenance"] = self.provenance
        return rec


class Dataset(list):
    """List of examples that remembers how many records were rejected on load."""

    def __init__(self, examples: Iterable[QAExample] = (), rejected: int = 0):
        super().__init__(examples)
        self.rejected = rejected


def load_dataset(path, domain_id: int = 0) -> Dataset:
    """Read a JSON-lines dataset file; records whose spans disagree with their text are dropped and counted."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"{path}: no such file")
    out = Dataset()
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                ex = QAExample(
                    id=str(rec["id"]),
                    context=rec["context"],
                    question=rec["question"],
                    answers=[Answer(a["text"], int(a["char_span"][0]), int(a["char_span"][1])) for a in rec["answers"]],
                    domain_id=domain_id,
                    split=rec.get("split", "train"),
                    provenance=rec.get("provenance", "original"),
                )
            except (json.JSONDecodeError, KeyError, TypeError, IndexError, ValueError) as err:
                raise DataError(f"{path}:{lineno}: malformed record ({err})") from err
            if ex.split not in SPLITS:
                raise DataError(f"{path}:{lineno}: unknown split {ex.split!r}")
            try:
                ex.check()
            except ValueError:
                out.rejected += 1
                continue
            out.append(ex)
    return out


def write_dataset(path, examples: Iterable[QAExample]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as fh:
        for ex in examples:
            fh.write(json.dumps(ex.to_record(), ensure_ascii=False) + "\n")


@dataclass(frozen=True)
class DomainEntry:
    name: str
    path: str
    role: str = "in"  # "in" or "ood"


@dataclass
class Manifest:
    entries: list[DomainEntry]
    base: Path = field(default_factory=Path)

    @property
    def names(self) -> list[str]:
        return [e.name for e in self.entries]

    def ids(self, role: str) -> list[int]:
        return [i for i, e in enumerate(self.entries) if e.role == role]

    def load(self) -> list[Dataset]:
        """One dataset per entry, domain id = entry index."""
        return [load_dataset(self.base / e.path, domain_id=i) for i, e in enumerate(self.entries)]

    def to_dict(self) -> dict:
        return {"datasets": [asdict(e) for e in self.entries]}

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n", encoding="utf-8")


def load_manifest(path) -> Manifest:
    path = Path(path)
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
        entries = [DomainEntry(d["name"], d["path"], d.get("role", "in")) for d in raw["datasets"]]
    except FileNotFoundError as err:
        raise DataError(f"{path}: no such manifest") from err
    except (json.JSONDecodeError, KeyError, TypeError) as err:
        raise DataError(f"{path}: malformed manifest ({err})") from err
    if not entries:
        raise DataError(f"{path}: manifest lists no datasets")
    for e in entries:
        if e.role not in ("in", "ood"):
            raise DataError(f"{path}: dataset {e.name!r} has unknown role {e.role!r}")
    if len(set(e.name for e in entries)) != len(entries):
        raise DataError(f"{path}: duplicate dataset names")
    return Manifest(entries, path.parent)


# ---------------------------------------------------------------- chunking


@dataclass
class Chunk:
    parent_id: str
    inputs: TokenizedInput
    gold_start: int
    gold_end: int
    domain_id: int
    window: tuple[int, int] = (0, 0)  # context-token range covered


def window_starts(n_tokens: int, capacity: int, stride: int) -> list[int]:
    """Window starts 0, C-stride, 2(C-stride), ... until one reaches the end.

    ``stride`` is the overlap between consecutive windows.
    """
    if capacity < stride + 1:
        raise ContractError(f"context capacity {capacity} must exceed stride {stride}")
    starts = [0]
    while starts[-1] + capacity < n_tokens:
        starts.append(starts[-1] + capacity - stride)
    return starts


def answer_token_span(offsets: Sequence[tuple[int, int]], answer: Answer) -> tuple[int, int] | None:
    """First and last context token overlapping the answer's characters."""
    first = last = None
    for i, (s, e) in enumerate(offsets):
        if e > answer.start and s < answer.end:
            if first is None:
                first = i
            last = i
    if first is None:
        return None
    return first, last


def chunk_example(ex: QAExample, vocab: Vocab, max_seq_len: int = 384, stride: int = 128) -> list[Chunk]:
    """Split an example into overlapping windows of the context.

    Gold positions point at the first answer when it lies wholly inside the
    window, else both are 0 (the [CLS] position).
    """
    q_tokens = tokenize(ex.question)
    c_tokens = tokenize(ex.context)
    capacity = max_seq_len - len(q_tokens) - 3
    starts = window_starts(len(c_tokens), capacity, stride)
    gold = answer_token_span([span for _, span in c_tokens], ex.answers[0]) if ex.answers else None
    chunks = []
    for w0 in starts:
        w1 = min(w0 + capacity, len(c_tokens))
        inputs = encode_tokens(q_tokens, c_tokens[w0:w1], max_seq_len, vocab)
        gs = ge = 0
        if gold is not None and w0 <= gold[0] and gold[1] < w1:
            begin = inputs.context_range[0]
            gs, ge = begin + gold[0] - w0, begin + gold[1] - w0
        chunks.append(Chunk(ex.id, inputs, gs, ge, ex.domain_id, (w0, w1)))
    return chunks


def chunk_dataset(examples: Iterable[QAExample], vocab: Vocab, max_seq_len: int = 384, stride: int = 128) -> list[Chunk]:
    out = []
    for ex in examples:
        out.extend(chunk_example(ex, vocab, max_seq_len, stride))
    return out


@dataclass
class Batch:
    ids: np.ndarray  # (B, T)
    attention_mask: np.ndarray
    valid_mask: np.ndarray
    gold_start: np.ndarray  # (B,)
    gold_end: np.ndarray
    domain_ids: np.ndarray

    def __len__(self) -> int:
        return self.ids.shape[0]


def collate(chunks: Sequence[Chunk], trim: bool = True) -> Batch:
    """Stack chunks; with ``trim`` the shared trailing padding is cut off.

    Trimming never changes non-PAD outputs because PAD keys are masked.
    """
    ids = np.stack([c.inputs.ids for c in chunks])
    mask = np.stack([c.inputs.attention_mask for c in chunks])
    valid = np.stack([c.inputs.valid_mask for c in chunks])
    if trim:
        t = int(mask.sum(axis=1).max())
        ids, mask, valid = ids[:, :t], mask[:, :t], valid[:, :t]
    return Batch(
        ids=ids,
        attention_mask=mask,
        valid_mask=valid,
        gold_start=np.array([c.gold_start for c in chunks]),
        gold_end=np.array([c.gold_end for c in chunks]),
        domain_ids=np.array([c.domain_id for c in chunks]),
    )


# ---------------------------------------------------------------- synthetic corpus

_ONSETS = ["b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z", "br", "tr", "sk", "pl"]
_VOWELS = ["a", "e", "i", "o", "u", "ai", "ou"]
_CODAS = ["", "", "n", "r", "s", "l", "k"]

# Sentence frames; domain d uses frame d mod len(...). Slots: {ent} {rel} {val}.
_FACT_FRAMES = [
    "the {rel} of {ent} is {val} .",
    "{ent} has {val} as its {rel} .",
    "for {ent} , the {rel} was {val} .",
    "records list {val} under the {rel} of {ent} .",
    "as for {ent} , its {rel} is called {val} .",
]
_QUESTION_FRAME = "what is the {rel} of {ent} ?"


@dataclass(frozen=True)
class CorpusSpec:
    n_domains: int = 3
    train_per_domain: int = 300
    val_per_domain: int = 100
    facts_per_context: int = 4
    entities_per_domain: int = 40
    relations_per_domain: int = 12
    values_per_relation: int = 6
    seed: int = 0


def _pseudo_words(rng: np.random.Generator, n: int, taken: set[str]) -> list[str]:
    words = []
    while len(words) < n:
        n_syl = int(rng.integers(2, 4))
        w = "".join(
            _ONSETS[rng.integers(len(_ONSETS))] + _VOWELS[rng.integers(len(_VOWELS))] + _CODAS[rng.integers(len(_CODAS))]
            for _ in range(n_syl)
        )
        if w not in taken:
            taken.add(w)
            words.append(w)
    return words


def _fill(frame: str, **slots) -> tuple[str, tuple[int, int] | None]:
    """Format ``frame``; also return the character span of ``{val}`` if present."""
    text = frame.format(**slots)
    if "{val}" not in frame:
        return text, None
    head = frame.split("{val}")[0].format(**slots)
    return text, (len(head), len(head) + len(slots["val"]))


def synth_generate(spec: CorpusSpec) -> tuple[list[QAExample], list[QAExample]]:
    """Templated factoid corpus, one entity per context.

    Each domain draws entities, relations and values from its own pool of
    pseudo-words, disjoint from every other domain's, so domain identity is
    recoverable from content words alone. Every relation has its own value
    pool, so the question's relation word tells which fact answers it.
    Answers are always verbatim context spans.
    """
    rng = np.random.default_rng(spec.seed)
    taken = {"the", "of", "is", "has", "as", "its", "for", "was", "what", "records", "list", "under", "called"}
    pools = []
    for _ in range(spec.n_domains):
        ents = _pseudo_words(rng, spec.entities_per_domain, taken)
        rels = _pseudo_words(rng, spec.relations_per_domain, taken)
        vals = [_pseudo_words(rng, spec.values_per_relation, taken) for _ in rels]
        pools.append((ents, rels, vals))

    train, val = [], []
    for d, (ents, rels, vals) in enumerate(pools):
        frame = _FACT_FRAMES[d % len(_FACT_FRAMES)]
        for split, count, sink in (("train", spec.train_per_domain, train), ("val", spec.val_per_domain, val)):
            for i in range(count):
                ent = ents[rng.integers(len(ents))]
                chosen_rels = rng.choice(len(rels), size=spec.facts_per_context, replace=False)
                target = int(rng.integers(spec.facts_per_context))
                parts, answer = [], None
                offset = 0
                for j, r in enumerate(chosen_rels):
                    n_words = 1 + int(rng.integers(2))
                    pool = vals[r]
                    value = " ".join(pool[v] for v in rng.choice(len(pool), size=n_words, replace=False))
                    sentence, span = _fill(frame, ent=ent, rel=rels[r], val=value)
                    if j == target:
                        answer = Answer(value, offset + span[0], offset + span[1])
                        question = _QUESTION_FRAME.format(rel=rels[r], ent=ent)
                    parts.append(sentence)
                    offset += len(sentence) + 1
                ex = QAExample(
                    id=f"d{d}-{split}-{i}",
                    context=" ".join(parts),
                    question=question,
                    answers=[answer],
                    domain_id=d,
                    split=split,
                )
                ex.check()
                sink.append(ex)
    return train, val


def write_synth_corpus(out_dir, spec: CorpusSpec, ood_domains: int = 0, names: Sequence[str] | None = None) -> Path:
    """Write one file per synthetic domain plus a manifest; the last ``ood_domains`` are marked ood."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    train, val = synth_generate(spec)
    names = list(names) if names else [f"synth{d}" for d in range(spec.n_domains)]
    entries = []
    for d in range(spec.n_domains):
        role = "ood" if d >= spec.n_domains - ood_domains else "in"
        fname = f"{names[d]}.jsonl"
        write_dataset(out_dir / fname, [ex for ex in train + val if ex.domain_id == d])
        entries.append(DomainEntry(names[d], fname, role))
    manifest_path = out_dir / "manifest.json"
    Manifest(entries, out_dir).save(manifest_path)
    return manifest_path
