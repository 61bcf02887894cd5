import json
from pathlib import Path

import numpy as np
import pytest

from advqa.augmentation import slice_context
from advqa.cli import EXIT_CONFIG, EXIT_DATA, OVERFIT_WARNING, RunConfig, evaluate, main
from advqa.dataio import Answer, QAExample, chunk_dataset, collate, load_manifest
from advqa.encoder import Vocab
from advqa.heads import SpanPrediction
from advqa.numerics import Tensor

TINY = {
    "train": {"epochs": 1, "batch_size": 8, "lr": 1e-3, "lambda1": 1.0},
    "encoder": {"n_layers": 1, "n_heads": 2, "d_model": 16, "d_ff": 32, "max_seq_len": 48},
    "data": {"stride": 12},
}


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("corpus")
    assert main(["synth", "--out", str(root), "--domains", "3", "--ood", "1", "--train-per-domain", "16", "--val-per-domain", "4"]) == 0
    (root / "tiny.json").write_text(json.dumps(TINY))
    return root


def train(corpus, out, *flags):
    argv = ["train", "--manifest", str(corpus / "manifest.json"), "--config", str(corpus / "tiny.json"), "--out", str(out), "--seed", "3"]
    assert main(argv + list(flags)) == 0
    return out


@pytest.fixture(scope="module")
def trained(corpus, tmp_path_factory):
    return train(corpus, tmp_path_factory.mktemp("run"), "--method", "qagan", "--head", "cmlp", "--anneal")


def read(path):
    return json.loads(Path(path).read_text())


class TestParsing:
    def test_no_command(self):
        assert main([]) == EXIT_CONFIG

    def test_bad_choice(self, tmp_path):
        assert main(["train", "--out", str(tmp_path), "--head", "lstm"]) == EXIT_CONFIG

    def test_baseline_with_anneal_rejected(self, corpus, tmp_path):
        argv = ["train", "--manifest", str(corpus / "manifest.json"), "--out", str(tmp_path), "--method", "baseline", "--anneal"]
        assert main(argv) == EXIT_CONFIG

    def test_unknown_config_key(self, corpus, tmp_path):
        (tmp_path / "c.json").write_text(json.dumps({"train": {"warp": 9}}))
        assert main(["train", "--manifest", str(corpus / "manifest.json"), "--config", str(tmp_path / "c.json"), "--out", str(tmp_path)]) == EXIT_CONFIG

    def test_missing_manifest(self, tmp_path):
        assert main(["train", "--manifest", str(tmp_path / "none.json"), "--out", str(tmp_path)]) == EXIT_DATA

    def test_missing_checkpoint(self, corpus, tmp_path):
        assert main(["eval", "--checkpoint", str(tmp_path / "x.npz"), "--out", str(tmp_path)]) == EXIT_DATA

    def test_flags_override_config_file(self, corpus, tmp_path):
        train(corpus, tmp_path, "--lr", "0.002", "--epochs", "0")
        cfg = read(tmp_path / "config.json")
        assert cfg["train"]["lr"] == 0.002 and cfg["encoder"]["d_model"] == 16


def test_train_outputs(trained):
    cfg = read(trained / "config.json")
    assert cfg["method"] == "qagan" and cfg["train"]["adversarial"] and cfg["train"]["anneal"]
    rows = [json.loads(line) for line in (trained / "train_log.jsonl").read_text().splitlines()]
    assert [r["step"] for r in rows] == list(range(len(rows))) and rows
    assert {"L_QA", "L_adv", "w", "L_D", "lr"} <= set(rows[0])
    assert cfg["train"]["n_max"] == len(rows)  # desk schedule spans the run
    metrics = read(trained / "metrics.json")
    assert set(metrics["per_dataset"]) == {"synth0", "synth1", "synth2"} and metrics["aggregate"]["count"] == 12


def test_eval_reproduces_training_metrics(trained, tmp_path):
    assert main(["eval", "--checkpoint", str(trained / "model.npz"), "--out", str(tmp_path)]) == 0
    assert read(tmp_path / "metrics.json") == read(trained / "metrics.json")


def test_replay_is_byte_identical(corpus, trained, tmp_path):
    again = train(corpus, tmp_path, "--method", "qagan", "--head", "cmlp", "--anneal")
    for name in ("metrics.json", "train_log.jsonl", "config.json"):
        assert (again / name).read_bytes() == (trained / name).read_bytes()


def test_lambda1_zero_matches_baseline(corpus, tmp_path):
    base = train(corpus, tmp_path / "b", "--method", "baseline")
    zero = train(corpus, tmp_path / "z", "--method", "qagan", "--lambda1", "0")
    assert (base / "metrics.json").read_bytes() == (zero / "metrics.json").read_bytes()
    lq = lambda p: [json.loads(x)["L_QA"] for x in (p / "train_log.jsonl").read_text().splitlines()]  # noqa: E731
    assert lq(base) == lq(zero)


class TestFinetune:
    def test_delta_table(self, trained, tmp_path, capsys):
        assert main(["finetune", "--checkpoint", str(trained / "model.npz"), "--out", str(tmp_path), "--finetune-epochs", "1"]) == 0
        out = capsys.readouterr()
        assert "dF1" in out.out and OVERFIT_WARNING not in out.err
        m = read(tmp_path / "metrics.json")
        assert set(m["delta"]) == {"synth0", "synth1", "synth2", "aggregate"}
        row = m["delta"]["synth2"]
        assert row["f1_delta"] == pytest.approx(row["f1_after"] - row["f1_before"], abs=0.011)

    def test_zero_epochs_changes_nothing(self, trained, tmp_path):
        assert main(["finetune", "--checkpoint", str(trained / "model.npz"), "--out", str(tmp_path), "--finetune-epochs", "0"]) == 0
        m = read(tmp_path / "metrics.json")
        assert m["before"] == m["after"] == read(trained / "metrics.json")

    def test_warns_after_ood_training(self, corpus, tmp_path, capsys):
        run = train(corpus, tmp_path / "r", "--method", "baseline", "--include-ood-train", "--epochs", "0")
        capsys.readouterr()
        assert main(["finetune", "--checkpoint", str(run / "model.npz"), "--out", str(tmp_path / "f"), "--finetune-epochs", "0"]) == 0
        assert OVERFIT_WARNING in capsys.readouterr().err

    def test_include_ood_train_uses_more_data(self, corpus, tmp_path):
        a = train(corpus, tmp_path / "a", "--method", "baseline")
        b = train(corpus, tmp_path / "b", "--method", "baseline", "--include-ood-train")
        steps = lambda p: len((p / "train_log.jsonl").read_text().splitlines())  # noqa: E731
        assert steps(b) > steps(a)


class TestAugment:
    def run(self, corpus, out, *flags):
        argv = ["augment", "--manifest", str(corpus / "manifest.json"), "--out", str(out), "--perplexity", "constant"]
        return main(argv + list(flags))

    def test_identity_accepts_all(self, corpus, tmp_path):
        assert self.run(corpus, tmp_path) == 0
        rep = read(tmp_path / "augment_report.json")
        assert all(r["accepted"] == r["inputs"] == 16 for r in rep.values())
        m = load_manifest(tmp_path / "manifest.json")
        assert [len(d) for d in m.load()] == [16, 16, 16]

    def test_morphing_counts(self, corpus, tmp_path):
        src = [ex for ex in load_manifest(corpus / "manifest.json").load()[0] if ex.split == "train"]
        word = src[0].answers[0].text.split()[0]
        expected = sum(
            word.lower() in ex.answers[0].text.lower()
            or ex.answers[0].text.lower() not in slice_context(ex.context, (ex.answers[0].start, ex.answers[0].end), 200)[0].replace(word, "").lower()
            for ex in src
        )
        assert self.run(corpus, tmp_path, "--translator", f"drop:{word}") == 0
        rep = read(tmp_path / "augment_report.json")["synth0"]
        assert rep["skipped_morphed"] == expected >= 1
        assert rep["accepted"] + rep["skipped_morphed"] + rep["skipped_perplexity"] + rep["errors"] == 16

    def test_augmented_manifest_feeds_training(self, corpus, tmp_path):
        assert self.run(corpus, tmp_path / "aug", "--translator", "none", "--embedder", "cooc", "--replace-prob", "0.3") == 0
        base = train(corpus, tmp_path / "a", "--method", "baseline")
        more = train(corpus, tmp_path / "b", "--method", "baseline", "--aug", str(tmp_path / "aug" / "manifest.json"))
        steps = lambda p: len((p / "train_log.jsonl").read_text().splitlines())  # noqa: E731
        assert steps(more) > steps(base)

    def test_dead_service_is_a_data_error(self, corpus, tmp_path, capsys):
        assert self.run(corpus, tmp_path, "--translator", "cmd:/nonexistent/bin") == EXIT_DATA
        assert "translator" in capsys.readouterr().err


def test_viz_two_checkpoints(corpus, trained, tmp_path):
    base = train(corpus, tmp_path / "base", "--method", "baseline", "--epochs", "0")
    argv = ["viz", "--checkpoint", str(base / "model.npz"), str(trained / "model.npz"), "--tags", "base", "adv", "--method", "pca", "--out", str(tmp_path / "v")]
    assert main(argv) == 0
    for tag in ("base", "adv"):
        lines = (tmp_path / "v" / f"coords_{tag}.csv").read_text().splitlines()
        assert lines[0] == "id,x,y,domain" and len(lines) == 13
        assert (tmp_path / "v" / f"projection_{tag}.svg").exists()
    assert set(read(tmp_path / "v" / "gap_report.json")) == {"base", "adv"}


class PeakModel:
    """Span model stand-in whose logits peak at the positions listed for each input row."""

    def __init__(self, peaks):
        self.peaks = peaks

    def __call__(self, ids, attention_mask, valid_mask, training=False):
        B, T = ids.shape
        s, e = np.zeros((B, T)), np.zeros((B, T))
        for b in range(B):
            key = tuple(ids[b][attention_mask[b] > 0])
            if key in self.peaks:
                i, j = self.peaks[key]
                s[b, i] = e[b, j] = 10.0
        return None, SpanPrediction(Tensor(s), Tensor(e), valid_mask)


def peaks_for(examples, vocab, rc, choose):
    out = {}
    for c in chunk_dataset(examples, vocab, rc.encoder["max_seq_len"], rc.data.stride):
        b = collate([c])
        out[tuple(b.ids[0][b.attention_mask[0] > 0])] = choose(c)
    return out


def rc_small():
    return RunConfig.from_dict({"encoder": {"max_seq_len": 24}, "data": {"stride": 4}})


def test_evaluate_with_gold_logits_is_perfect(corpus):
    datasets = load_manifest(corpus / "manifest.json").load()
    val = [ex for ds in datasets for ex in ds if ex.split == "val"]
    vocab = Vocab.build(t for ex in val for t in (ex.question, ex.context))
    rc = rc_small()
    model = PeakModel(peaks_for(val, vocab, rc, lambda c: (c.gold_start, c.gold_end) if c.gold_start else (1, 0)))
    rep = evaluate(model, val, vocab, rc, ["a", "b", "c"]).to_dict()
    assert rep["aggregate"] == {"f1": 100.0, "em": 100.0, "count": 12}


def test_evaluate_two_examples_by_hand():
    a = QAExample("a", "Emily Perkins played Eunice .", "who ?", [Answer("Emily Perkins", 0, 13)])
    b = QAExample("b", "the music industry is big .", "what ?", [Answer("music", 4, 9)], domain_id=1)
    vocab = Vocab.build([a.context, b.context, "who ? what ?"])
    rc = rc_small()

    def choose(c):
        if c.parent_id == "a":
            return c.gold_start, c.gold_end
        return c.gold_start, c.gold_start + 1  # "music industry"

    rep = evaluate(PeakModel(peaks_for([a, b], vocab, rc, choose)), [a, b], vocab, rc, ["x", "y"])
    assert rep.per_dataset["x"]["f1"] == 100.0 and rep.per_dataset["y"]["em"] == 0.0
    assert rep.per_dataset["y"]["f1"] == pytest.approx(200 / 3)
    assert rep.aggregate["f1"] == pytest.approx((100 + 200 / 3) / 2) and rep.aggregate["em"] == 50.0
