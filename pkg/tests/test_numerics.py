import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from advqa import numerics as nx
from advqa.numerics import AdamState, ContractError, NumericError, Tape, Tensor, adam_step, backward, grad_check, parameter


def grads_of(f, x):
    x = parameter(x, "x")
    with Tape() as tape:
        y = f(x)
    return backward(tape, y, {"x": x})["x"]


class TestBackward:
    def test_sum_of_squares(self):
        np.testing.assert_allclose(grads_of(lambda x: (x * x).sum(), np.array([1.0, 2.0])), [2.0, 4.0])

    def test_softmax_first_component_at_origin(self):
        g = grads_of(lambda x: nx.softmax(x)[0], np.zeros(2))
        np.testing.assert_allclose(g, [0.25, -0.25], atol=1e-15)

    def test_constant_function_gives_zero_gradient(self):
        c = Tensor(np.ones(3))
        g = grads_of(lambda x: (c * 2.0).sum() + 0.0 * x.sum(), np.arange(3.0))
        assert np.array_equal(g, np.zeros(3))

    def test_leaf_off_the_path_gets_zeros(self):
        x, unused = parameter(np.ones(2)), parameter(np.ones(4))
        with Tape() as tape:
            y = (x * 3.0).sum()
        g = backward(tape, y, {"x": x, "u": unused})
        assert np.array_equal(g["u"], np.zeros(4))

    def test_non_scalar_output_rejected(self):
        x = parameter(np.ones(2))
        with Tape() as tape:
            y = x * 2.0
        with pytest.raises(ContractError):
            backward(tape, y, {"x": x})

    def test_open_tape_rejected(self):
        x = parameter(np.ones(2))
        with Tape() as tape:
            y = x.sum()
            with pytest.raises(ContractError):
                backward(tape, y, {"x": x})

    def test_non_finite_result_raises(self):
        with pytest.raises(NumericError):
            nx.log(Tensor(np.array([-1.0])))


# every differentiable op, wrapped as x -> scalar with a fixed random projection
def _proj(y, seed=7):
    w = np.random.default_rng(seed).normal(size=y.shape)
    return (y * Tensor(w)).sum()


OPS = {
    "add": (lambda x: _proj(x + Tensor(np.linspace(0, 1, x.data.size).reshape(x.shape))), None),
    "sub": (lambda x: _proj(1.5 - x), None),
    "mul": (lambda x: _proj(x * x), None),
    "div": (lambda x: _proj(x / (x * x + 1.0)), None),
    "neg": (lambda x: _proj(-x), None),
    "exp": (lambda x: _proj(nx.exp(x)), None),
    "log": (lambda x: _proj(nx.log(x * x + 0.5)), None),
    "tanh": (lambda x: _proj(nx.tanh(x)), None),
    "relu": (lambda x: _proj(nx.relu(x)), "away_from_zero"),
    "gelu": (lambda x: _proj(nx.gelu(x)), None),
    "clip_min": (lambda x: _proj(nx.clip_min(x, 0.0)), "away_from_zero"),
    "softmax": (lambda x: _proj(nx.softmax(x, axis=-1)), None),
    "log_softmax": (lambda x: _proj(nx.log_softmax(x, axis=-1)), None),
    "masked_fill": (lambda x: _proj(nx.softmax(nx.masked_fill(x, np.arange(x.shape[-1]) % 2 == 0), axis=-1)), None),
    "layer_norm": (
        lambda x: _proj(nx.layer_norm(x, Tensor(np.linspace(0.5, 1.5, x.shape[-1])), Tensor(np.full(x.shape[-1], 0.1)))),
        None,
    ),
    "matmul": (lambda x: _proj(x @ Tensor(np.random.default_rng(3).normal(size=(x.shape[-1], 3)))), None),
    "linear": (lambda x: _proj(nx.linear(x, Tensor(np.random.default_rng(4).normal(size=(x.shape[-1], 2))), Tensor(np.ones(2)))), None),
    "concat": (lambda x: _proj(nx.concat([x, x * 2.0], axis=-1)), None),
    "getitem": (lambda x: _proj(x[..., 1:3]), None),
    "reshape": (lambda x: _proj(x.reshape(-1)), None),
    "transpose": (lambda x: _proj(x.transpose()), None),
    "sum": (lambda x: _proj(x.sum(axis=-1)), None),
    "mean": (lambda x: _proj(x.mean(axis=0)), None),
    "dropout": (lambda x: _proj(nx.dropout(x, 0.3, np.random.default_rng(0))), None),
}


@pytest.mark.parametrize("name", sorted(OPS))
@pytest.mark.parametrize("seed", range(10))
def test_every_op_passes_grad_check(name, seed):
    f, domain = OPS[name]
    x = np.random.default_rng(seed).normal(size=(3, 4))
    if domain == "away_from_zero":
        x = np.sign(x) * (np.abs(x) + 0.05)
    assert grad_check(f, Tensor(x)) < 1e-4


def test_embedding_grad_check():
    ids = np.array([[1, 3, 3], [0, 2, 1]])
    assert grad_check(lambda w: _proj(nx.embedding(w, ids)), Tensor(np.random.default_rng(0).normal(size=(5, 4)))) < 1e-4


def test_embedding_accumulates_repeated_ids():
    g = grads_of(lambda w: nx.embedding(w, np.array([2, 2, 0])).sum(), np.zeros((3, 2)))
    np.testing.assert_array_equal(g, [[1, 1], [0, 0], [2, 2]])


class TestGradCheck:
    def test_quadratic_is_exact(self):
        assert grad_check(lambda x: (x * x).sum(), Tensor(np.array([1.0, 2.0, 3.0])), eps=1e-5) < 1e-8

    def test_three_class_cross_entropy(self):
        x = Tensor(np.random.default_rng(5).normal(size=3))
        assert grad_check(lambda x: -nx.log_softmax(x)[1], x, eps=1e-4) < 1e-6

    @pytest.mark.parametrize("eps", [0.0, -1e-3, 0.1])
    def test_eps_out_of_range(self, eps):
        with pytest.raises(ContractError):
            grad_check(lambda x: x.sum(), Tensor(np.ones(2)), eps=eps)

    def test_non_finite_value_rejected(self):
        with pytest.raises(NumericError):
            grad_check(lambda x: (x * np.inf).sum(), Tensor(np.ones(2)))


class TestAdam:
    def test_zero_gradient_keeps_params(self):
        p = {"a": parameter(np.array([1.0, -2.0]))}
        st_ = AdamState(lr=0.1)
        adam_step(p, {"a": np.zeros(2)}, st_)
        np.testing.assert_array_equal(p["a"].data, [1.0, -2.0])
        assert st_.t == 1

    def test_one_step_with_bias_correction(self):
        p = {"w": parameter(np.array(0.0))}
        adam_step(p, {"w": np.array(1.0)}, AdamState(lr=0.1))
        # m_hat = 1, v_hat = 1 -> step = lr * 1 / (1 + eps)
        assert p["w"].data == pytest.approx(-0.1 / (1 + 1e-8), abs=1e-15)

    def test_identical_params_move_identically(self):
        p = {"a": parameter(np.array([0.3])), "b": parameter(np.array([0.3]))}
        st_ = AdamState(lr=0.01)
        for _ in range(5):
            adam_step(p, {"a": np.array([0.7]), "b": np.array([0.7])}, st_)
        assert p["a"].data[0] == p["b"].data[0]

    def test_shape_mismatch(self):
        with pytest.raises(ContractError):
            adam_step({"a": parameter(np.zeros(2))}, {"a": np.zeros(3)}, AdamState())

    def test_key_mismatch(self):
        with pytest.raises(ContractError):
            adam_step({"a": parameter(np.zeros(2))}, {"b": np.zeros(2)}, AdamState())

    def test_negative_lr(self):
        with pytest.raises(ContractError):
            adam_step({"a": parameter(np.zeros(2))}, {"a": np.zeros(2)}, AdamState(lr=-1.0))


finite_rows = arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(2, 6)), elements=st.floats(-30, 30))


@settings(max_examples=60, deadline=None)
@given(finite_rows)
def test_softmax_rows_sum_to_one(x):
    np.testing.assert_allclose(nx.softmax(Tensor(x)).data.sum(axis=-1), 1.0, atol=1e-12)


@settings(max_examples=60, deadline=None)
@given(finite_rows, st.data())
def test_log_softmax_nll_is_cross_entropy(x, data):
    label = data.draw(st.integers(0, x.shape[1] - 1))
    nll = -nx.log_softmax(Tensor(x)).data[:, label]
    explicit = -(x[:, label] - np.log(np.exp(x - x.max(axis=1, keepdims=True)).sum(axis=1)) - x.max(axis=1))
    np.testing.assert_allclose(nll, explicit, atol=1e-10)


def test_masked_entries_get_exactly_zero_probability():
    p = nx.softmax(nx.masked_fill(Tensor(np.array([3.0, 1.0, 2.0])), np.array([True, False, True]))).data
    assert p[1] == 0.0


def test_run_context_streams_are_independent_and_replayable():
    a, b = nx.RunContext(9), nx.RunContext(9)
    a.rng("adversary").random(100)
    assert a.rng("shuffle").random() == b.rng("shuffle").random()
    assert nx.RunContext(9).rng("init").random() == nx.RunContext(9).rng("init").random()
