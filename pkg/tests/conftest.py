import numpy as np
import pytest

from advqa.dataio import Answer, QAExample
from advqa.encoder import EncoderConfig, TransformerEncoder, Vocab


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def make_example(context, question, answer, domain=0, ex_id="ex", split="train"):
    start = context.index(answer)
    return QAExample(ex_id, context, question, [Answer(answer, start, start + len(answer))], domain, split)


@pytest.fixture
def tiny_encoder():
    """A d=8, one-layer encoder over a 40-token vocabulary."""

    def build(seed=0, **overrides):
        cfg = EncoderConfig(**{**dict(vocab_size=40, n_layers=1, n_heads=2, d_model=8, d_ff=16, max_seq_len=16, init_std=0.3), **overrides})
        return TransformerEncoder(cfg, np.random.default_rng(seed))

    return build


@pytest.fixture
def small_vocab():
    return Vocab.build(["the cat sat on the mat . where did the cat sit ? a dog ran in the park"])


def tiny_batch(B=2, T=8, K=3, vocab_size=40, seed=0):
    from advqa.dataio import Batch

    r = np.random.default_rng(seed)
    ids = r.integers(4, vocab_size, size=(B, T))
    ids[:, 0] = 2
    valid = np.zeros((B, T), dtype=np.int8)
    valid[:, 3 : T - 1] = 1
    gs = r.integers(3, T - 1, size=B)
    ge = np.minimum(gs + 1, T - 2)
    return Batch(ids, np.ones((B, T), dtype=np.int8), valid, gs, ge, np.arange(B) % K)


def tiny_state(cfg, d=8, K=3, seed=0, vocab_size=40, init_std=0.3, disc_init_std=0.5, max_seq_len=16):
    from advqa.encoder import EncoderConfig, TransformerEncoder
    from advqa.model import SpanModel
    from advqa.numerics import RunContext
    from advqa.trainer import init_state

    ctx = RunContext(seed)
    enc = TransformerEncoder(
        EncoderConfig(vocab_size=vocab_size, n_layers=1, n_heads=2, d_model=d, d_ff=2 * d, max_seq_len=max_seq_len, init_std=init_std),
        ctx.rng("init"),
    )
    model = SpanModel(enc, cfg.head, d_model=d, rng=ctx.rng("init"))
    for p in model.head_params.values():
        p.data *= 10  # livelier heads for gradient checks
    return init_state(model, cfg, ctx, K, d, disc_init_std)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
