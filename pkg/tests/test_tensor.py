import math
import threading

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from phaselab import tensor as T
from phaselab.tensor import Graph, GraphError, ShapeError, Tensor


def _rng(seed=0):
    return np.random.default_rng(seed)


def _p(*shape, seed=0, scale=1.0):
    return Tensor(_rng(seed).normal(0, scale, size=shape), requires_grad=True)


# --- forward values -------------------------------------------------------


def test_matmul_identity():
    A = _rng().normal(size=(3, 3))
    out = T.matmul(Tensor(np.eye(3)), Tensor(A))
    np.testing.assert_array_equal(out.data, A)


def test_softmax_uniform_row():
    out = T.softmax(Tensor(np.zeros((1, 3))))
    np.testing.assert_allclose(out.data, [[1 / 3] * 3], rtol=0, atol=1e-15)


def test_causal_softmax_masks_future():
    out = T.softmax(Tensor(_rng().normal(size=(2, 4, 4))), causal=True).data
    assert np.all(np.triu(out, 1) == 0)
    np.testing.assert_allclose(out.sum(-1), 1.0, atol=1e-12)
    np.testing.assert_array_equal(out[:, 0, 0], 1.0)


def _gelu_scalar(x):
    return 0.5 * x * (1 + math.tanh(math.sqrt(2 / math.pi) * (x + 0.044715 * x**3)))


def test_gelu_matches_scalar_reference():
    X = _rng(1).normal(size=(4, 4)) * 2
    out = T.gelu(Tensor(X)).data
    ref = np.vectorize(_gelu_scalar)(X)
    np.testing.assert_allclose(out, ref, rtol=1e-13, atol=1e-15)


def test_layer_norm_matches_scalar_reference():
    rng = _rng(2)
    X, g, b = rng.normal(size=(4, 4)), rng.normal(size=4), rng.normal(size=4)
    out = T.layer_norm(Tensor(X), Tensor(g), Tensor(b)).data
    for r in range(4):
        row = list(X[r])
        mu = sum(row) / 4
        var = sum((v - mu) ** 2 for v in row) / 4
        for c in range(4):
            assert out[r, c] == pytest.approx((row[c] - mu) / math.sqrt(var + 1e-5) * g[c] + b[c], rel=1e-12)


def test_layer_norm_normalizes_rows():
    X = _rng(3).normal(3, 5, size=(6, 32))
    out = T.layer_norm(Tensor(X), Tensor(np.ones(32)), Tensor(np.zeros(32))).data
    assert np.abs(out.mean(-1)).max() < 1e-6
    assert np.abs(out.var(-1) - 1).max() < 1e-4


def test_cross_entropy_value():
    logits = np.log(np.array([[0.2, 0.5, 0.3], [0.1, 0.1, 0.8]]))
    ce = T.cross_entropy(Tensor(logits), np.array([1, 2])).data
    assert float(ce) == pytest.approx(-(math.log(0.5) + math.log(0.8)) / 2, rel=1e-12)


def test_embedding_gathers_rows():
    W = _rng().normal(size=(5, 3))
    out = T.embedding(Tensor(W), np.array([[4, 0], [2, 2]])).data
    np.testing.assert_array_equal(out[1, 0], W[2])
    assert out.shape == (2, 2, 3)


def test_slice_concat_roundtrip():
    X = _rng().normal(size=(2, 3, 6))
    parts = [T.slice_last(Tensor(X), a, a + 2) for a in (0, 2, 4)]
    np.testing.assert_array_equal(T.concat_last(parts).data, X)


def test_int_input_becomes_float():
    assert Tensor(np.arange(3)).dtype == np.float64
    assert Tensor(np.zeros(2, dtype=np.float32)).dtype == np.float32


def test_forward_is_bitwise_deterministic():
    rng = _rng(5)
    x, w, g = rng.normal(size=(3, 5, 8)), rng.normal(size=(8, 8)), rng.normal(size=8)

    def run():
        h = T.layer_norm(T.gelu(T.matmul(Tensor(x), Tensor(w))), Tensor(g), Tensor(g))
        return T.softmax(T.matmul(h, h, transpose_b=True), causal=True).data

    assert run().tobytes() == run().tobytes()


# --- shape errors ---------------------------------------------------------


def test_matmul_shape_error_names_primitive_and_dims():
    with pytest.raises(ShapeError) as ei:
        T.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 5))))
    assert ei.value.primitive == "matmul"
    assert "(2, 3)" in str(ei.value) and "(4, 5)" in str(ei.value)


def test_no_trailing_broadcast():
    with pytest.raises(ShapeError):
        T.add(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 1))))


def test_leading_broadcast_allowed():
    out = T.add(Tensor(np.zeros((4, 2, 3))), Tensor(np.ones((2, 3))))
    assert out.shape == (4, 2, 3)


def test_slice_out_of_range():
    with pytest.raises(ShapeError):
        T.slice_last(Tensor(np.zeros((2, 3))), 1, 5)


# --- backward -------------------------------------------------------------


def test_grad_of_sum_is_ones():
    x = Tensor(np.arange(4.0).reshape(2, 2), requires_grad=True)
    with Graph() as g:
        loss = T.sum_all(x)
    g.backward(loss)
    np.testing.assert_array_equal(x.grad, np.ones((2, 2)))


def test_grad_of_square():
    x = Tensor(np.array(3.0), requires_grad=True)
    with Graph() as g:
        loss = x * x
    g.backward(loss)
    assert float(x.grad) == 6.0


def test_grad_accumulates_over_uses():
    x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    with Graph() as g:
        loss = T.sum_all(T.add(T.mul(x, 3.0), x))
    g.backward(loss)
    np.testing.assert_array_equal(x.grad, [4.0, 4.0])


def test_backward_before_forward():
    x = Tensor(np.ones(2), requires_grad=True)
    loss = T.sum_all(x)  # recorded on no graph
    with pytest.raises(GraphError):
        Graph().backward(loss)


def test_nonscalar_loss():
    x = Tensor(np.ones(2), requires_grad=True)
    with Graph() as g:
        y = T.mul(x, 2.0)
    with pytest.raises(GraphError):
        g.backward(y)


def test_one_backward_per_graph():
    x = Tensor(np.ones(2), requires_grad=True)
    with Graph() as g:
        loss = T.sum_all(x)
    g.backward(loss)
    with pytest.raises(GraphError):
        g.backward(loss)


def test_graph_records_in_topological_order():
    a, b = _p(2, 3), _p(3, 2, seed=1)
    with Graph() as g:
        T.sum_all(T.gelu(T.matmul(a, b)))
    assert g.ops == ["matmul", "gelu", "sum"]


# --- gradient checks ------------------------------------------------------


def test_linear_model_gradcheck():
    rng = _rng(7)
    X, y = rng.normal(size=(6, 3)), rng.normal(size=(6, 1))
    w = _p(3, 1, seed=8)

    def loss():
        r = T.add(T.matmul(Tensor(X), w), Tensor(-y))
        return T.mean_all(T.mul(r, r))

    assert T.check_gradients(loss, [w]) < 1e-8


def test_two_layer_mlp_gradcheck():
    rng = _rng(9)
    X = Tensor(rng.normal(size=(5, 4)))
    tgt = rng.integers(0, 3, size=5)
    w1, b1, w2, b2 = _p(4, 8, seed=1), _p(8, seed=2), _p(8, 3, seed=3), _p(3, seed=4)

    def loss():
        h = T.gelu(T.add(T.matmul(X, w1), b1))
        return T.cross_entropy(T.add(T.matmul(h, w2), b2), tgt)

    assert T.check_gradients(loss, [w1, b1, w2, b2]) < 1e-4


PRIMITIVES = {
    "matmul": lambda p: T.matmul(p[0], p[1]),
    "matmul_t": lambda p: T.matmul(p[0], p[1], transpose_b=True),
    "add": lambda p: T.add(p[0], p[1]),
    "mul": lambda p: T.mul(p[0], p[1]),
    "softmax": lambda p: T.softmax(p[0]),
    "softmax_causal": lambda p: T.softmax(T.matmul(p[0], p[1], transpose_b=True), causal=True),
    "layer_norm": lambda p: T.layer_norm(p[0], p[2], p[3]),
    "gelu": lambda p: T.gelu(p[0]),
    "embedding": lambda p: T.embedding(p[1], np.array([[0, 2, 2], [1, 0, 1]])),
    "slice_concat": lambda p: T.concat_last([T.slice_last(p[0], 2, 4), T.slice_last(p[0], 0, 2)]),
}


def _primitive_params(seed):
    return [_p(2, 3, 4, seed=seed), _p(3, 4, seed=seed + 1), _p(4, seed=seed + 2), _p(4, seed=seed + 3)]


@pytest.mark.parametrize("name", sorted(PRIMITIVES))
def test_primitive_gradcheck(name):
    worst = 0.0
    for seed in range(10):
        params = _primitive_params(seed)
        if name == "matmul":
            params[1] = _p(4, 3, seed=seed + 1)
        w = Tensor(_rng(seed + 50).normal(size=PRIMITIVES[name](params).shape))

        def loss(params=params, w=w):
            return T.sum_all(T.mul(PRIMITIVES[name](params), w))

        worst = max(worst, T.check_gradients(loss, params, n_samples=8, seed=seed))
    assert worst < 1e-4


def test_cross_entropy_gradcheck():
    logits = _p(3, 5, 7, seed=11)
    tgt = _rng(12).integers(0, 7, size=(3, 5))
    assert T.check_gradients(lambda: T.cross_entropy(logits, tgt), [logits]) < 1e-6


def test_corrupted_gelu_rule_is_detected(monkeypatch):
    x = _p(3, 4, seed=13)
    orig = T._gelu_grad
    monkeypatch.setattr(T, "_gelu_grad", lambda X, t=None: orig(X, t) * 1.5)
    err = T.check_gradients(lambda: T.sum_all(T.gelu(x)), [x])
    assert err > 1e-2


def test_check_gradients_rejects_bad_epsilon():
    x = _p(2)
    with pytest.raises(ValueError):
        T.check_gradients(lambda: T.sum_all(x), [x], epsilon=0.0)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 6), st.integers(1, 6), st.integers(0, 2**31 - 1))
def test_softmax_rows_sum_to_one(rows, cols, seed):
    X = _rng(seed).normal(0, 10, size=(rows, cols)).astype(np.float32)
    out = T.softmax(Tensor(X)).data
    assert np.abs(out.sum(-1) - 1).max() < 1e-6
    assert np.all(np.isfinite(out))


def test_distinct_graphs_in_threads():
    results = {}

    def work(i):
        x = Tensor(np.full(3, float(i)), requires_grad=True)
        with Graph() as g:
            loss = T.sum_all(T.mul(x, x))
        g.backward(loss)
        results[i] = x.grad.copy()

    threads = [threading.Thread(target=work, args=(i,)) for i in range(4)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    for i in range(4):
        np.testing.assert_array_equal(results[i], np.full(3, 2.0 * i))
