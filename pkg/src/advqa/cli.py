"""Command line: synth, train, finetune, augment, eval, viz.

Every command takes an optional JSON ``--config`` file; flags override its
values and the effective configuration is written next to the outputs as
``config.json``. Exit codes: 0 ok, 2 configuration error, 3 data error,
4 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import shlex
import sys
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import augmentation as aug
from .dataio import CorpusSpec, DataError, Dataset, Manifest, QAExample, chunk_dataset, load_manifest, write_dataset, write_synth_corpus
from .encoder import RESERVED, EncoderConfig, TransformerEncoder, Vocab, tokenize
from .evaluation import MetricReport, domain_gap, score_predictions, write_coordinates, write_report, write_svg
from .heads import DEFAULT_MAX_ANSWER_LEN
from .model import SpanModel, embed_cls, load_checkpoint, predict_answers, save_checkpoint
from .numerics import AdamState, ContractError, NumericError, RunContext
from .trainer import JsonlLog, TrainConfig, TrainState, desk_schedule, finetune, fit, init_state, steps_per_epoch

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4

OVERFIT_WARNING = (
    "warning: this checkpoint was trained with out-of-domain train data included; fine-tuning on that same "
    "small set again tends to overfit it and can lower out-of-domain validation scores"
)


class ConfigError(ContractError):
    pass


@dataclass
class DataConfig:
    manifest: str | None = None
    stride: int = 128
    include_ood_train: bool = False
    aug: str | None = None  # manifest of augmented train files, merged by dataset name
    schedule: str = "desk"  # "desk": rescale n_ws/n_max to the run length; "fixed": use them as given
    max_answer_len: int = DEFAULT_MAX_ANSWER_LEN


@dataclass
class RunConfig:
    method: str = "qagan"
    train: TrainConfig = field(default_factory=TrainConfig)
    encoder: dict = field(default_factory=lambda: _encoder_defaults())
    augment: aug.AugmentConfig = field(default_factory=aug.AugmentConfig)
    data: DataConfig = field(default_factory=DataConfig)
    disc_init_std: float = 0.02

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "train": self.train.to_dict(),
            "encoder": dict(self.encoder),
            "augment": self.augment.to_dict(),
            "data": asdict(self.data),
            "disc_init_std": self.disc_init_std,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        base = cls()
        try:
            return cls(
                method=d.get("method", base.method),
                train=TrainConfig(**{**base.train.to_dict(), **d.get("train", {})}),
                encoder={**base.encoder, **d.get("encoder", {})},
                augment=aug.AugmentConfig(**{**base.augment.to_dict(), **d.get("augment", {})}),
                data=DataConfig(**{**asdict(base.data), **d.get("data", {})}),
                disc_init_std=d.get("disc_init_std", base.disc_init_std),
            )
        except TypeError as err:
            raise ConfigError(f"unknown configuration key: {err}") from err

    def validate(self) -> None:
        if self.method not in ("baseline", "qagan"):
            raise ConfigError(f"method must be baseline or qagan, got {self.method!r}")
        if self.data.schedule not in ("desk", "fixed"):
            raise ConfigError(f"schedule must be desk or fixed, got {self.data.schedule!r}")
        if self.train.h_kld and self.train.batch_size < 2:
            raise ConfigError("h_kld needs batch_size >= 2 to fit a variance")
        if self.method == "baseline" and (self.train.h_kld or self.train.anneal):
            raise ConfigError("anneal and h_kld only apply to qagan runs")
        EncoderConfig(vocab_size=len(Vocab()), **self.encoder)
        if not 0 <= self.data.stride < self.encoder["max_seq_len"]:
            raise ConfigError("stride must be smaller than max_seq_len")


def _encoder_defaults() -> dict:
    d = {f.name: f.default for f in fields(EncoderConfig) if f.name != "vocab_size"}
    d["init_std"] = 0.1
    return d


PRESETS = {
    "paper": {},
    "desk": {
        "train": {"lr": 1e-3, "disc_lr": 3e-3, "lambda1": 2.0, "epochs": 8, "batch_size": 16},
        "encoder": {"max_seq_len": 64},
        "data": {"stride": 16},
        "disc_init_std": 0.1,
    },
}


# ---------------------------------------------------------------- config assembly

# flag dest -> (section, key)
_FLAG_MAP = {
    "method": (None, "method"),
    "head": ("train", "head"),
    "disc_input": ("train", "disc_input"),
    "disc_objective": ("train", "disc_objective"),
    "anneal": ("train", "anneal"),
    "h_kld": ("train", "h_kld"),
    "lambda1": ("train", "lambda1"),
    "lambda2": ("train", "lambda2"),
    "lr": ("train", "lr"),
    "epochs": ("train", "epochs"),
    "batch_size": ("train", "batch_size"),
    "seed": ("train", "seed"),
    "n_ws": ("train", "n_ws"),
    "n_max": ("train", "n_max"),
    "max_seq_len": ("encoder", "max_seq_len"),
    "stride": ("data", "stride"),
    "manifest": ("data", "manifest"),
    "include_ood_train": ("data", "include_ood_train"),
    "aug": ("data", "aug"),
    "schedule": ("data", "schedule"),
    "ppl_ratio_max": ("augment", "ppl_ratio_max"),
    "replace_prob": ("augment", "replace_prob"),
    "neighbor_k": ("augment", "neighbor_k"),
    "slice_padding": ("augment", "slice_padding_chars"),
}


def _merge(into: dict, extra: dict) -> dict:
    for k, v in extra.items():
        if isinstance(v, dict) and isinstance(into.get(k), dict):
            _merge(into[k], v)
        else:
            into[k] = v
    return into


def build_config(args: argparse.Namespace, base: dict | None = None) -> RunConfig:
    """preset < stored config (checkpoint) < ``--config`` file < flags."""
    merged = RunConfig().to_dict()
    _merge(merged, json.loads(json.dumps(PRESETS[getattr(args, "preset", None) or "paper"])))
    if base:
        _merge(merged, base)
    if getattr(args, "config", None):
        try:
            _merge(merged, json.loads(Path(args.config).read_text(encoding="utf-8")))
        except FileNotFoundError as err:
            raise ConfigError(f"{args.config}: no such config file") from err
        except json.JSONDecodeError as err:
            raise ConfigError(f"{args.config}: not valid JSON ({err})") from err
    for dest, (section, key) in _FLAG_MAP.items():
        value = getattr(args, dest, None)
        if value is None:
            continue
        if section is None:
            merged[key] = value
        else:
            merged[section][key] = value
    merged["train"]["adversarial"] = merged["method"] != "baseline"
    rc = RunConfig.from_dict(merged)
    rc.validate()
    return rc


def write_config(out: Path, rc: RunConfig, extra: dict | None = None) -> None:
    payload = rc.to_dict()
    if extra:
        payload["command"] = extra
    write_report(out / "config.json", payload)


# ---------------------------------------------------------------- data helpers


def _manifest(rc: RunConfig) -> Manifest:
    if not rc.data.manifest:
        raise ConfigError("a dataset manifest is required (--manifest)")
    return load_manifest(rc.data.manifest)


def _split(datasets: Sequence[Dataset], ids: Sequence[int], split: str) -> list[QAExample]:
    return [ex for i in ids for ex in datasets[i] if ex.split == split]


def _augmented(rc: RunConfig, manifest: Manifest, roles: Sequence[str]) -> list[QAExample]:
    aug_manifest = load_manifest(rc.data.aug)
    by_name = {e.name: i for i, e in enumerate(manifest.entries)}
    out = []
    for entry, ds in zip(aug_manifest.entries, aug_manifest.load()):
        if entry.name not in by_name:
            raise DataError(f"augmented dataset {entry.name!r} is not in the training manifest")
        k = by_name[entry.name]
        if manifest.entries[k].role not in roles:
            continue
        out.extend(replace(ex, domain_id=k) for ex in ds if ex.split == "train")
    return out


def build_vocab(datasets: Sequence[Dataset]) -> Vocab:
    """Token inventory of every train split in the manifest (no answers involved)."""
    return Vocab.build(ex.question + " " + ex.context for ds in datasets for ex in ds if ex.split == "train")


def build_model(rc: RunConfig, vocab: Vocab, params: dict | None = None) -> tuple[SpanModel, RunContext]:
    ctx = RunContext(rc.train.seed)
    enc_cfg = EncoderConfig(vocab_size=len(vocab), **rc.encoder)
    enc_params = None if params is None else {k: v for k, v in params.items() if k.startswith("enc.")}
    head_params = None if params is None else {k: v for k, v in params.items() if k.startswith("head.")}
    encoder = TransformerEncoder(enc_cfg, ctx.rng("init"), params=enc_params, dropout_rng=ctx.rng("dropout"))
    model = SpanModel(
        encoder,
        rc.train.head,
        head_params=head_params,
        d_model=enc_cfg.d_model,
        rng=ctx.rng("init"),
        activation=enc_cfg.activation,
        condition=rc.train.cmlp_condition,
    )
    return model, ctx


def evaluate(model: SpanModel, examples: Sequence[QAExample], vocab: Vocab, rc: RunConfig, names: Sequence[str]) -> MetricReport:
    if not examples:
        raise DataError("evaluation set is empty")
    preds = predict_answers(
        model, examples, vocab, rc.encoder["max_seq_len"], rc.data.stride, max_answer_len=rc.data.max_answer_len
    )
    golds = {ex.id: [a.text for a in ex.answers] for ex in examples}
    return score_predictions(preds, golds, {ex.id: names[ex.domain_id] for ex in examples})


def _save(path: Path, state: TrainState, rc: RunConfig, vocab: Vocab) -> None:
    groups = {"qa": state.model.params}
    opts = {"qa": state.qa_opt}
    if state.disc_params is not None:
        groups["disc"] = state.disc_params
        opts["disc"] = state.disc_opt
    meta = {"run_config": rc.to_dict(), "z": state.z, "vocab": vocab.itos}
    save_checkpoint(path, groups, meta, opts)


def _restore(path, args) -> tuple[TrainState, RunConfig, Vocab, Manifest]:
    """Model, optimizer and step counter from a checkpoint; flags may override its stored config."""
    try:
        groups, meta, opts = load_checkpoint(path)
    except FileNotFoundError as err:
        raise DataError(str(err)) from err
    rc = build_config(args, base=meta["run_config"])
    vocab = Vocab(meta["vocab"][len(RESERVED) :])
    manifest = _manifest(rc)
    model, ctx = build_model(rc, vocab, groups["qa"])
    state = TrainState(model=model, qa_opt=opts.get("qa", AdamState(lr=rc.train.lr)), ctx=ctx, z=int(meta["z"]))
    state.qa_opt.lr = rc.train.lr
    if rc.train.adversarial:
        fresh = init_state(model, rc.train, ctx, len(manifest.entries), rc.encoder["d_model"], rc.disc_init_std)
        state.disc_cfg, state.disc_params, state.disc_opt = fresh.disc_cfg, fresh.disc_params, fresh.disc_opt
        if "disc" in groups:
            state.disc_params = groups["disc"]
            state.disc_opt = opts.get("disc", fresh.disc_opt)
            state.disc_opt.lr = fresh.disc_opt.lr
    return state, rc, vocab, manifest


def _resolve_schedule(rc: RunConfig, n_chunks: int, epochs: int) -> TrainConfig:
    if rc.data.schedule == "fixed":
        return rc.train
    n_ws, n_max = desk_schedule(steps_per_epoch(n_chunks, rc.train.batch_size) * max(epochs, 1))
    return replace(rc.train, n_ws=n_ws, n_max=n_max)


# ---------------------------------------------------------------- commands


def cmd_synth(args) -> int:
    spec = CorpusSpec(
        n_domains=args.domains,
        train_per_domain=args.train_per_domain,
        val_per_domain=args.val_per_domain,
        seed=args.seed if args.seed is not None else 0,
    )
    path = write_synth_corpus(args.out, spec, ood_domains=args.ood)
    print(f"wrote {path}")
    return EXIT_OK


def cmd_train(args) -> int:
    rc = build_config(args)
    out = Path(args.out)
    manifest = _manifest(rc)
    datasets = manifest.load()
    roles = ("in", "ood") if rc.data.include_ood_train else ("in",)
    if rc.data.include_ood_train and not manifest.ids("ood"):
        raise ConfigError("--include-ood-train given but the manifest has no ood datasets")
    train_ex = _split(datasets, [i for i, e in enumerate(manifest.entries) if e.role in roles], "train")
    if rc.data.aug:
        train_ex += _augmented(rc, manifest, roles)
    if not train_ex:
        raise DataError("no training examples")
    vocab = build_vocab(datasets)
    chunks = chunk_dataset(train_ex, vocab, rc.encoder["max_seq_len"], rc.data.stride)
    rc = replace(rc, train=_resolve_schedule(rc, len(chunks), rc.train.epochs))

    out.mkdir(parents=True, exist_ok=True)
    write_config(out, rc, {"name": "train"})
    model, ctx = build_model(rc, vocab)
    state = init_state(model, rc.train, ctx, len(manifest.entries), rc.encoder["d_model"], rc.disc_init_std)
    with JsonlLog(out / "train_log.jsonl") as log:
        fit(state, chunks, rc.train, log=log)
    _save(out / "model.npz", state, rc, vocab)
    val = _split(datasets, range(len(datasets)), "val")
    report = evaluate(model, val, vocab, rc, manifest.names)
    write_report(out / "metrics.json", report.to_dict())
    _print_report(report)
    return EXIT_OK


def cmd_finetune(args) -> int:
    state, rc, vocab, manifest = _restore(args.checkpoint, args)
    out = Path(args.out)
    datasets = manifest.load()
    ood = manifest.ids("ood")
    ood_train = _split(datasets, ood, "train")
    if not ood_train:
        raise DataError("the manifest has no out-of-domain train examples to fine-tune on")
    if rc.data.include_ood_train:
        print(OVERFIT_WARNING, file=sys.stderr)
    epochs = rc.train.epochs if args.finetune_epochs is None else args.finetune_epochs
    val = _split(datasets, range(len(datasets)), "val")
    before = evaluate(state.model, val, vocab, rc, manifest.names)
    chunks = chunk_dataset(ood_train, vocab, rc.encoder["max_seq_len"], rc.data.stride)
    # the anneal schedule carries on from the pre-training step count
    out.mkdir(parents=True, exist_ok=True)
    write_config(out, rc, {"name": "finetune", "checkpoint": str(args.checkpoint), "epochs": epochs})
    with JsonlLog(out / "train_log.jsonl") as log:
        if epochs > 0:
            finetune(state, chunks, rc.train, epochs=epochs, log=log)
    _save(out / "model.npz", state, rc, vocab)
    after = evaluate(state.model, val, vocab, rc, manifest.names)
    table = delta_table(before, after)
    write_report(out / "metrics.json", {"before": before.to_dict(), "after": after.to_dict(), "delta": table})
    print(format_delta(table))
    return EXIT_OK


def delta_table(before: MetricReport, after: MetricReport) -> dict:
    rows = {}
    b, a = before.to_dict(), after.to_dict()
    for name in list(b["per_dataset"]) + ["aggregate"]:
        x = b["aggregate"] if name == "aggregate" else b["per_dataset"][name]
        y = a["aggregate"] if name == "aggregate" else a["per_dataset"][name]
        rows[name] = {
            "f1_before": x["f1"],
            "f1_after": y["f1"],
            "f1_delta": round(y["f1"] - x["f1"], 2),
            "em_before": x["em"],
            "em_after": y["em"],
            "em_delta": round(y["em"] - x["em"], 2),
        }
    return rows


def format_delta(table: dict) -> str:
    head = f"{'dataset':<16}{'F1 before':>10}{'F1 after':>10}{'dF1':>8}{'EM before':>11}{'EM after':>10}{'dEM':>8}"
    lines = [head, "-" * len(head)]
    for name, r in table.items():
        lines.append(
            f"{name:<16}{r['f1_before']:>10.2f}{r['f1_after']:>10.2f}{r['f1_delta']:>+8.2f}"
            f"{r['em_before']:>11.2f}{r['em_after']:>10.2f}{r['em_delta']:>+8.2f}"
        )
    return "\n".join(lines)


def _print_report(report: MetricReport) -> None:
    d = report.to_dict()
    for name, v in d["per_dataset"].items():
        print(f"{name:<16} F1 {v['f1']:6.2f}  EM {v['em']:6.2f}  n={v['count']}")
    a = d["aggregate"]
    print(f"{'aggregate':<16} F1 {a['f1']:6.2f}  EM {a['em']:6.2f}  n={a['count']}")


def _port(spec: str, kind: str, corpus: Sequence[str]):
    if spec in ("none", ""):
        return None
    if spec.startswith("cmd:"):
        return aug.SubprocessPort(shlex.split(spec[4:]), name=f"{kind} port ({spec[4:]})")
    if spec.startswith(("http://", "https://")):
        return aug.HttpPort(spec, name=f"{kind} port ({spec})")
    if kind == "translator":
        if spec == "identity":
            return aug.IdentityTranslator()
        if spec.startswith("drop:"):
            return aug.RewriteTranslator([(w, "") for w in spec[5:].split(",") if w])
    if kind == "perplexity":
        if spec == "constant":
            return aug.ConstantPerplexity()
        if spec == "unigram":
            return aug.UnigramPerplexity(corpus)
    if kind == "embedder":
        if spec == "cooc":
            return cooccurrence_neighbors(corpus)
        if spec.startswith("table:"):
            try:
                return aug.TableNeighbors(json.loads(Path(spec[6:]).read_text(encoding="utf-8")))
            except (OSError, json.JSONDecodeError) as err:
                raise aug.PortError(f"{kind} port ({spec}): {err}") from err
    raise ConfigError(f"unknown {kind} port {spec!r}")


def cooccurrence_neighbors(corpus: Sequence[str], window: int = 2, min_count: int = 2) -> aug.VectorNeighbors:
    """Word vectors from SVD of a log co-occurrence matrix; a stand-in for pretrained embeddings."""
    docs = [[w.lower() for w, _ in tokenize(t) if w.isalnum()] for t in corpus]
    counts: dict[str, int] = {}
    for doc in docs:
        for w in doc:
            counts[w] = counts.get(w, 0) + 1
    words = sorted(w for w, c in counts.items() if c >= min_count)
    if len(words) < 2:
        return aug.VectorNeighbors([], np.zeros((0, 1)))
    index = {w: i for i, w in enumerate(words)}
    m = np.zeros((len(words), len(words)))
    for doc in docs:
        for i, w in enumerate(doc):
            if w not in index:
                continue
            for u in doc[max(0, i - window) : i + window + 1]:
                if u != w and u in index:
                    m[index[w], index[u]] += 1
    u, s, _ = np.linalg.svd(np.log1p(m), full_matrices=False)
    dim = min(32, len(words))
    return aug.VectorNeighbors(words, u[:, :dim] * s[:dim])


def cmd_augment(args) -> int:
    rc = build_config(args)
    manifest = _manifest(rc)
    datasets = manifest.load()
    out = Path(args.out)
    corpus = [ex.context for ds in datasets for ex in ds if ex.split == "train"]
    translator = _port(args.translator, "translator", corpus)
    perplexity = _port(args.perplexity, "perplexity", corpus) if translator is not None else None
    embedder = _port(args.embedder, "embedder", corpus)
    if translator is None and embedder is None:
        raise ConfigError("nothing to do: give a translator or an embedder")
    for port, kind in ((translator, "translator"), (perplexity, "perplexity"), (embedder, "embedder")):
        if port is not None:
            aug.check_port(port, kind)
    out.mkdir(parents=True, exist_ok=True)
    write_config(out, rc, {"name": "augment", "translator": args.translator, "perplexity": args.perplexity, "embedder": args.embedder})
    entries, totals = [], {}
    for entry, ds in zip(manifest.entries, datasets):
        source = [ex for ex in ds if ex.split == "train"]
        cap = args.max_in if entry.role == "in" else args.max_ood
        if cap is not None:
            source = source[:cap]
        produced, report = aug.augment_dataset(source, rc.augment, translator, perplexity, embedder)
        write_dataset(out / f"{entry.name}.jsonl", produced)
        entries.append(type(entry)(entry.name, f"{entry.name}.jsonl", entry.role))
        totals[entry.name] = report.to_dict()
        print(
            f"{entry.name:<16} inputs {report.inputs}  accepted {report.accepted}  skipped-morphed {report.skipped_morphed}"
            f"  skipped-perplexity {report.skipped_perplexity}  errors {report.errors}  replaced {report.replaced}"
        )
    Manifest(entries, out).save(out / "manifest.json")
    write_report(out / "augment_report.json", totals)
    for port in (translator, perplexity, embedder):
        if isinstance(port, aug.SubprocessPort):
            port.close()
    return EXIT_OK


def cmd_eval(args) -> int:
    state, rc, vocab, manifest = _restore(args.checkpoint, args)
    datasets = manifest.load()
    examples = _split(datasets, range(len(datasets)), args.split)
    report = evaluate(state.model, examples, vocab, rc, manifest.names)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_config(out, rc, {"name": "eval", "checkpoint": str(args.checkpoint), "split": args.split})
    write_report(out / "metrics.json", report.to_dict())
    _print_report(report)
    return EXIT_OK


def cmd_viz(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    summary = {}
    for k, ck in enumerate(args.checkpoint):
        state, rc, vocab, manifest = _restore(ck, args)
        datasets = manifest.load()
        examples = _split(datasets, range(len(datasets)), args.split)
        if not examples:
            raise DataError(f"no {args.split} examples to project")
        if args.max_per_domain is not None:
            kept, seen = [], {}
            for ex in examples:
                if seen.get(ex.domain_id, 0) < args.max_per_domain:
                    kept.append(ex)
                    seen[ex.domain_id] = seen.get(ex.domain_id, 0) + 1
            examples = kept
        emb = embed_cls(state.model.encoder, examples, vocab, rc.encoder["max_seq_len"], rc.data.stride)
        params = {"perplexity": args.perplexity, "n_iter": args.n_iter} if args.proj == "tsne" else {}
        gap = domain_gap(emb, [ex.domain_id for ex in examples], [ex.id for ex in examples], args.proj, args.seed or 0, **params)
        tag = args.tags[k] if args.tags and k < len(args.tags) else Path(ck).parent.name or f"run{k}"
        write_coordinates(out / f"coords_{tag}.csv", gap, manifest.names)
        write_svg(out / f"projection_{tag}.svg", gap, manifest.names)
        summary[tag] = {**gap.summary(), "checkpoint": str(ck)}
        print(f"{tag:<16} probe accuracy {gap.probe_accuracy:.3f}  silhouette {gap.silhouette:.3f}")
    write_report(out / "gap_report.json", summary)
    return EXIT_OK


# ---------------------------------------------------------------- parser


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON run configuration; flags override it")
    p.add_argument("--preset", choices=sorted(PRESETS), help="starting hyperparameters (desk suits the synthetic corpus)")
    p.add_argument("--manifest", help="dataset manifest (JSON)")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int)


def _add_model_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--method", choices=["baseline", "qagan"])
    p.add_argument("--head", choices=["mlp", "cmlp", "csat"], help="prediction head (P_head)")
    p.add_argument("--disc-input", choices=["cls", "hidden"], help="discriminator input (D_input)")
    p.add_argument("--disc-objective", choices=["nll", "kld"], help="adversarial objective (D_obj)")
    p.add_argument("--anneal", action="store_true", default=None, help="heated-tanh weight on the adversarial term")
    p.add_argument("--h-kld", action="store_true", default=None, help="Gaussian KL regularizer on [CLS] vectors")
    p.add_argument("--include-ood-train", action="store_true", default=None, help="merge ood train splits (ood_train)")
    p.add_argument("--aug", metavar="MANIFEST", help="merge augmented train files from this manifest (aug)")
    p.add_argument("--lambda1", type=float)
    p.add_argument("--lambda2", type=float)
    p.add_argument("--lr", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--n-ws", type=int)
    p.add_argument("--n-max", type=int)
    p.add_argument("--schedule", choices=["desk", "fixed"])
    p.add_argument("--max-seq-len", type=int)
    p.add_argument("--stride", type=int)


def make_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="advqa", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a synthetic multi-domain corpus and manifest")
    p.add_argument("--out", required=True)
    p.add_argument("--domains", type=int, default=4)
    p.add_argument("--ood", type=int, default=1, help="how many of the domains are out-of-domain")
    p.add_argument("--train-per-domain", type=int, default=1000)
    p.add_argument("--val-per-domain", type=int, default=100)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a baseline or adversarial QA model")
    _add_common(p)
    _add_model_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("finetune", help="continue training a checkpoint on ood train data")
    _add_common(p)
    _add_model_flags(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--finetune-epochs", type=int)
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("augment", help="back-translation and word-replacement augmentation")
    _add_common(p)
    p.add_argument("--translator", default="identity", help="identity | drop:W1,W2 | cmd:COMMAND | http://URL | none")
    p.add_argument("--perplexity", default="unigram", help="unigram | constant | cmd:COMMAND | http://URL")
    p.add_argument("--embedder", default="none", help="none | cooc | table:FILE | cmd:COMMAND | http://URL")
    p.add_argument("--ppl-ratio-max", type=float)
    p.add_argument("--replace-prob", type=float)
    p.add_argument("--neighbor-k", type=int)
    p.add_argument("--slice-padding", type=int)
    p.add_argument("--max-in", type=int, help="cap on source examples per in-domain dataset")
    p.add_argument("--max-ood", type=int, help="cap on source examples per ood dataset")
    p.set_defaults(func=cmd_augment)

    p = sub.add_parser("eval", help="F1/EM of a checkpoint")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", default="val", choices=["train", "val", "test"])
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("viz", help="2-D projection and domain-gap scores of [CLS] vectors")
    _add_common(p)
    p.add_argument("--checkpoint", required=True, nargs="+")
    p.add_argument("--tags", nargs="+", help="names for the output files, one per checkpoint")
    p.add_argument("--split", default="val", choices=["train", "val", "test"])
    p.add_argument("--method", dest="proj", choices=["pca", "tsne"], default="tsne")
    p.add_argument("--perplexity", type=float, default=30.0)
    p.add_argument("--n-iter", type=int, default=1000)
    p.add_argument("--max-per-domain", type=int)
    p.set_defaults(func=cmd_viz)
    return ap


def main(argv: Sequence[str] | None = None) -> int:
    ap = make_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    try:
        return args.func(args)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, aug.PortError, FileNotFoundError) as err:
        print(f"data error: {err}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as err:
        print(f"numeric failure: {err}", file=sys.stderr)
        return EXIT_NUMERIC
    except ContractError as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
