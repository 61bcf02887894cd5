import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from advqa.dataio import (
    Answer,
    CorpusSpec,
    DataError,
    QAExample,
    chunk_example,
    collate,
    load_dataset,
    load_manifest,
    synth_generate,
    window_starts,
    write_dataset,
    write_synth_corpus,
)
from advqa.encoder import Vocab
from advqa.evaluation import probe_domain_accuracy
from advqa.heads import aggregate_chunks, span_text
from advqa.numerics import ContractError
from conftest import make_example


def record(i, context="the cat sat on the mat .", text="cat", span=(4, 7), split="train"):
    return {"id": i, "context": context, "question": "who sat ?", "answers": [{"text": text, "char_span": list(span)}], "split": split}


def write_lines(path, rows):
    path.write_text("".join((r if isinstance(r, str) else json.dumps(r)) + "\n" for r in rows), encoding="utf-8")
    return path


class TestLoad:
    def test_empty_file(self, tmp_path):
        ds = load_dataset(write_lines(tmp_path / "e.jsonl", []))
        assert len(ds) == 0 and ds.rejected == 0

    def test_span_mismatch_is_dropped_and_counted(self, tmp_path):
        rows = [record("a"), record("b", span=(5, 8)), record("c", text="dog")]
        ds = load_dataset(write_lines(tmp_path / "d.jsonl", rows))
        assert [e.id for e in ds] == ["a"] and ds.rejected == 2

    def test_malformed_line_number(self, tmp_path):
        path = write_lines(tmp_path / "d.jsonl", [record("a"), "{not json"])
        with pytest.raises(DataError, match=r"d\.jsonl:2"):
            load_dataset(path)

    def test_unknown_split(self, tmp_path):
        with pytest.raises(DataError, match="split"):
            load_dataset(write_lines(tmp_path / "d.jsonl", [record("a", split="dev")]))

    def test_missing_file(self, tmp_path):
        with pytest.raises(DataError):
            load_dataset(tmp_path / "nope.jsonl")

    def test_manifest_assigns_domain_ids_in_order(self, tmp_path):
        for name in "xyz":
            write_lines(tmp_path / f"{name}.jsonl", [record(name)])
        (tmp_path / "m.json").write_text(json.dumps({"datasets": [{"name": n, "path": f"{n}.jsonl"} for n in "xyz"]}))
        sets = load_manifest(tmp_path / "m.json").load()
        assert [ds[0].domain_id for ds in sets] == [0, 1, 2]

    @pytest.mark.parametrize(
        "raw",
        [{"datasets": []}, {"files": []}, {"datasets": [{"name": "a", "path": "a", "role": "train"}]}, {"datasets": [{"name": "a", "path": "a"}] * 2}],
    )
    def test_bad_manifest(self, tmp_path, raw):
        (tmp_path / "m.json").write_text(json.dumps(raw))
        with pytest.raises(DataError):
            load_manifest(tmp_path / "m.json")

    def test_write_then_load_round_trips(self, tmp_path):
        ex = make_example("alpha beta gamma .", "which ?", "beta", ex_id="r1")
        ex.provenance = "augmented"
        write_dataset(tmp_path / "o.jsonl", [ex])
        back = load_dataset(tmp_path / "o.jsonl")[0]
        assert back == ex


class TestWindows:
    def test_three_windows(self):
        assert window_starts(22, 10, 4) == [0, 6, 12]

    @pytest.mark.parametrize("n", [0, 1, 10])
    def test_short_context_single_window(self, n):
        assert window_starts(n, 10, 4) == [0]

    def test_stride_must_be_below_capacity(self):
        with pytest.raises(ContractError):
            window_starts(30, 4, 4)


@settings(max_examples=1000, deadline=None)
@given(st.integers(0, 400), st.integers(2, 60), st.data())
def test_cover_and_overlap(n, capacity, data):
    stride = data.draw(st.integers(0, capacity - 1))
    starts = window_starts(n, capacity, stride)
    covered = np.zeros(max(n, 1), dtype=bool)
    for s in starts:
        covered[s : min(s + capacity, n)] = True
    assert covered[:n].all()
    assert starts[-1] + capacity >= n
    for a, b in zip(starts, starts[1:]):
        assert a + capacity - b == stride
        assert a + capacity < n  # no window past the one reaching the end


def chunk_fixture(n_words=22, answer_at=(9, 10)):
    words = [f"w{i}" for i in range(n_words)]
    context = " ".join(words)
    start = len(" ".join(words[: answer_at[0]])) + (1 if answer_at[0] else 0)
    text = " ".join(words[answer_at[0] : answer_at[1] + 1])
    ex = QAExample("s", context, "q", [Answer(text, start, start + len(text))])
    ex.check()
    vocab = Vocab.build([context, "q"])
    return ex, vocab


class TestChunking:
    def test_window_count_and_layout(self):
        ex, vocab = chunk_fixture()
        chunks = chunk_example(ex, vocab, max_seq_len=14, stride=4)  # capacity 10
        assert [c.window for c in chunks] == [(0, 10), (6, 16), (12, 22)]
        assert all(c.inputs.context_range == (3, 3 + c.window[1] - c.window[0]) for c in chunks)

    def test_straddling_answer_only_gold_where_whole(self):
        ex, vocab = chunk_fixture(answer_at=(9, 10))  # tokens 9-10 cross the first window's edge
        chunks = chunk_example(ex, vocab, max_seq_len=14, stride=4)
        assert (chunks[0].gold_start, chunks[0].gold_end) == (0, 0)
        assert (chunks[1].gold_start, chunks[1].gold_end) == (3 + 3, 3 + 4)
        assert (chunks[2].gold_start, chunks[2].gold_end) == (0, 0)
        c = chunks[1]
        assert span_text(ex.context, c.inputs.offsets, c.gold_start, c.gold_end) == "w9 w10"

    def test_short_context_single_chunk(self):
        ex, vocab = chunk_fixture(n_words=8, answer_at=(2, 2))
        (c,) = chunk_example(ex, vocab, max_seq_len=14, stride=4)
        assert (c.gold_start, c.gold_end) == (5, 5)

    def test_aggregate_with_oracle_logits_recovers_answers(self, tmp_path):
        train, _ = synth_generate(CorpusSpec(n_domains=2, train_per_domain=15, val_per_domain=0))
        write_dataset(tmp_path / "d.jsonl", train)
        loaded = load_dataset(tmp_path / "d.jsonl")
        vocab = Vocab.build(e.question + " " + e.context for e in loaded)
        for ex in loaded:
            chunks = chunk_example(ex, vocab, max_seq_len=24, stride=6)
            assert len(chunks) > 1
            preds = []
            for c in chunks:
                T = len(c.inputs.ids)
                s, e = np.zeros(T), np.zeros(T)
                if c.gold_start > 0:
                    s[c.gold_start] = e[c.gold_end] = 10.0
                preds.append((c, (s, e, c.inputs.valid_mask)))
            assert aggregate_chunks(preds, ex.context) == ex.answers[0].text


@settings(max_examples=150, deadline=None)
@given(st.integers(1, 60), st.integers(0, 59), st.integers(0, 3), st.integers(0, 5))
def test_gold_round_trip(n_words, a0, extra, stride):
    a0 = min(a0, n_words - 1)
    a1 = min(a0 + extra, n_words - 1)
    ex, vocab = chunk_fixture(n_words, (a0, a1))
    chunks = chunk_example(ex, vocab, max_seq_len=14, stride=stride)
    golds = [c for c in chunks if c.gold_start > 0]
    # answers no longer than stride + 1 tokens always fit one window
    if a1 - a0 <= stride:
        assert golds
    for c in golds:
        assert span_text(ex.context, c.inputs.offsets, c.gold_start, c.gold_end) == ex.answers[0].text


def test_collate_trims_shared_padding():
    ex, vocab = chunk_fixture(n_words=8, answer_at=(2, 2))
    ex2, _ = chunk_fixture(n_words=4, answer_at=(1, 1))
    chunks = chunk_example(ex, vocab, 20, 4) + chunk_example(ex2, vocab, 20, 4)
    full = collate(chunks, trim=False)
    cut = collate(chunks)
    assert full.ids.shape == (2, 20) and cut.ids.shape == (2, 12)
    assert np.array_equal(full.ids[:, :12], cut.ids) and not full.attention_mask[:, 12:].any()
    assert list(cut.gold_start) == [5, 4]


class TestSynth:
    spec = CorpusSpec(n_domains=3, train_per_domain=40, val_per_domain=10)

    def test_counts_and_splits(self):
        train, val = synth_generate(self.spec)
        assert len(train) == 120 and len(val) == 30
        assert {e.split for e in train} == {"train"} and {e.split for e in val} == {"val"}
        assert np.bincount([e.domain_id for e in train]).tolist() == [40, 40, 40]

    def test_deterministic_per_seed(self):
        a, _ = synth_generate(self.spec)
        b, _ = synth_generate(self.spec)
        c, _ = synth_generate(CorpusSpec(n_domains=3, train_per_domain=40, val_per_domain=10, seed=1))
        assert a == b and a != c

    def test_spans_are_verbatim(self):
        train, val = synth_generate(self.spec)
        for ex in train + val:
            ex.check()

    def test_bag_of_words_separates_domains(self):
        train, _ = synth_generate(self.spec)
        vocab = Vocab.build(e.context for e in train)
        counts = np.zeros((len(train), len(vocab)))
        for i, ex in enumerate(train):
            for tok in ex.context.lower().split():
                counts[i, vocab.id(tok)] += 1
        assert probe_domain_accuracy(counts, np.array([e.domain_id for e in train])) > 0.95

    def test_corpus_writer_marks_ood(self, tmp_path):
        m = load_manifest(write_synth_corpus(tmp_path, self.spec, ood_domains=1))
        assert m.ids("in") == [0, 1] and m.ids("ood") == [2]
        sets = m.load()
        assert [len(ds) for ds in sets] == [50, 50, 50] and all(ds.rejected == 0 for ds in sets)
