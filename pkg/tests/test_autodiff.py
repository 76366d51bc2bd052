import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from idu_detector.autodiff import Graph, RunningStats, backward
from idu_detector.errors import ConfigError, NumericError, ShapeError, UsageError


def naive_attention(q, k, v):
    t, dk = q.shape
    out = np.zeros_like(v, dtype=np.float64)
    for i in range(t):
        scores = [sum(q[i, c] * k[j, c] for c in range(dk)) / math.sqrt(dk) for j in range(t)]
        m = max(scores)
        w = [math.exp(s - m) for s in scores]
        z = sum(w)
        for c in range(dk):
            out[i, c] = sum(w[j] / z * v[j, c] for j in range(t))
    return out


def central_diff(f, arrays, h=1e-3):
    """Central-difference gradient of scalar f with respect to every array in place."""
    grads = []
    for a in arrays:
        g = np.zeros_like(a)
        it = np.nditer(a, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            orig = a[idx]
            a[idx] = orig + h
            fp = f()
            a[idx] = orig - h
            fm = f()
            a[idx] = orig
            g[idx] = (fp - fm) / (2 * h)
        grads.append(g)
    return grads


def rel_err(a, b, floor=1e-6):
    return np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor))


# -- matmul --------------------------------------------------------------------


def test_matmul_identity():
    g = Graph()
    a = np.array([[1.5, -2.0], [0.25, 4.0]], dtype=np.float32)
    out = g.matmul(g.constant(np.eye(2)), g.constant(a))
    np.testing.assert_array_equal(out.value, a)


def test_matmul_hand_values():
    g = Graph()
    out = g.matmul(g.constant([[1, 2], [3, 4]]), g.constant([[5], [6]]))
    np.testing.assert_array_equal(out.value, [[17], [39]])


def test_matmul_zeros():
    g = Graph()
    out = g.matmul(g.constant(np.zeros((3, 4))), g.constant(np.random.default_rng(0).normal(size=(4, 2))))
    assert out.shape == (3, 2)
    assert not out.value.any()


def test_matmul_dim_mismatch():
    g = Graph()
    with pytest.raises(ShapeError):
        g.matmul(g.constant(np.zeros((2, 3))), g.constant(np.zeros((2, 3))))


# -- batchnorm -----------------------------------------------------------------


def test_batchnorm_hand_values():
    g = Graph(np.float64)
    out = g.batchnorm1d(g.constant([[1.0], [3.0]]), g.param("g", [1.0]), g.param("b", [0.0]), eps=0.0)
    np.testing.assert_allclose(out.value, [[-1.0], [1.0]])


def test_batchnorm_constant_column_is_zero():
    g = Graph()
    x = np.full((5, 1), 7.0)
    out = g.batchnorm1d(g.constant(x), g.param("g", [1.0]), g.param("b", [0.0]))
    np.testing.assert_array_equal(out.value, np.zeros((5, 1)))


def test_batchnorm_zero_gamma_gives_beta():
    g = Graph()
    x = np.random.default_rng(1).normal(size=(6, 3))
    beta = np.array([0.5, -1.0, 2.0])
    out = g.batchnorm1d(g.constant(x), g.param("g", np.zeros(3)), g.param("b", beta))
    np.testing.assert_allclose(out.value, np.broadcast_to(beta, (6, 3)), atol=1e-7)


def test_batchnorm_needs_two_rows_in_train():
    g = Graph()
    with pytest.raises(ConfigError):
        g.batchnorm1d(g.constant([[1.0, 2.0]]), g.param("g", [1.0, 1.0]), g.param("b", [0.0, 0.0]))


def test_batchnorm_running_stats_and_infer():
    rs = RunningStats.fresh(2)
    x = np.array([[0.0, 10.0], [2.0, 14.0], [4.0, 18.0]])
    g = Graph()
    g.batchnorm1d(g.constant(x), g.param("g", np.ones(2)), g.param("b", np.zeros(2)), running=rs)
    np.testing.assert_allclose(rs.mean, 0.1 * x.mean(axis=0), rtol=1e-6)
    np.testing.assert_allclose(rs.var, 0.9 + 0.1 * x.var(axis=0, ddof=1), rtol=1e-6)
    g2 = Graph()
    out = g2.batchnorm1d(g2.constant(x[:1]), g2.param("g", np.ones(2)), g2.param("b", np.zeros(2)),
                         mode="infer", running=rs)
    expected = (x[:1] - rs.mean) / np.sqrt(rs.var + 1e-5)
    np.testing.assert_allclose(out.value, expected, rtol=1e-5)


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 40), st.integers(1, 6), st.integers(0, 10_000))
def test_batchnorm_train_normalises(b, d, seed):
    x = np.random.default_rng(seed).normal(3.0, 5.0, size=(b, d))
    g = Graph(np.float64)
    out = g.batchnorm1d(g.constant(x), g.param("g", np.ones(d)), g.param("b", np.zeros(d)), eps=0.0)
    assert np.all(np.abs(out.value.mean(axis=0)) < 1e-6)
    assert np.all(np.abs(out.value.var(axis=0) - 1.0) < 1e-4)


# -- attention -----------------------------------------------------------------


def test_attention_zero_queries_average_values():
    g = Graph(np.float64)
    v = np.random.default_rng(2).normal(size=(4, 3))
    k = np.random.default_rng(3).normal(size=(4, 3))
    out = g.scaled_dot_attention(g.constant(np.zeros((4, 3))), g.constant(k), g.constant(v))
    np.testing.assert_allclose(out.value, np.broadcast_to(v.mean(axis=0), (4, 3)))


def test_attention_single_token_returns_values():
    g = Graph(np.float64)
    rng = np.random.default_rng(4)
    v = rng.normal(size=(1, 5))
    out = g.scaled_dot_attention(g.constant(rng.normal(size=(1, 5))), g.constant(rng.normal(size=(1, 5))),
                                 g.constant(v))
    np.testing.assert_allclose(out.value, v)


def test_attention_matches_loop_oracle():
    rng = np.random.default_rng(5)
    q, k, v = (rng.normal(size=(3, 4)) for _ in range(3))
    g = Graph(np.float64)
    out = g.scaled_dot_attention(g.constant(q), g.constant(k), g.constant(v))
    np.testing.assert_allclose(out.value, naive_attention(q, k, v), atol=1e-12)


def test_attention_rows_of_weights_sum_to_one():
    rng = np.random.default_rng(6)
    g = Graph(np.float64)
    out = g.scaled_dot_attention(*(g.constant(rng.normal(size=(2, 5, 3))) for _ in range(3)))
    np.testing.assert_allclose(out.ctx["p"].sum(axis=-1), 1.0, atol=1e-9)


def test_attention_rejects_zero_width():
    g = Graph()
    z = g.constant(np.zeros((3, 0)))
    with pytest.raises(ShapeError):
        g.scaled_dot_attention(z, z, z)


# -- elementwise / structural ops ---------------------------------------------


def test_relu_values():
    g = Graph()
    np.testing.assert_array_equal(g.relu(g.constant([-1.0, 0.0, 2.0])).value, [0, 0, 2])


def test_softmax_of_zeros_is_uniform():
    g = Graph()
    np.testing.assert_array_equal(g.softmax_rows(g.constant([[0.0, 0.0]])).value, [[0.5, 0.5]])


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 8), st.integers(1, 10), st.integers(0, 10_000))
def test_softmax_rows_sum_to_one(rows, cols, seed):
    x = np.random.default_rng(seed).normal(0, 10, size=(rows, cols))
    g = Graph(np.float64)
    p = g.softmax_rows(g.constant(x)).value
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-9)
    assert np.all((p > 0) & (p < 1)) or cols == 1
    g32 = Graph()
    np.testing.assert_allclose(g32.softmax_rows(g32.constant(x)).value.sum(axis=1), 1.0, atol=1e-6)


def test_concat_left_block_first():
    g = Graph()
    a, b = np.ones((4, 2)), np.zeros((4, 3))
    out = g.concat_cols([g.constant(a), g.constant(b)])
    assert out.shape == (4, 5)
    np.testing.assert_array_equal(out.value[:, :2], a)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 6), st.lists(st.integers(1, 5), min_size=1, max_size=5), st.integers(0, 9999))
def test_concat_then_slice_recovers_parts(rows, widths, seed):
    rng = np.random.default_rng(seed)
    parts = [rng.normal(size=(rows, w)).astype(np.float32) for w in widths]
    g = Graph()
    cat = g.concat_cols([g.constant(p) for p in parts])
    assert cat.shape == (rows, sum(widths))
    start = 0
    for p in parts:
        np.testing.assert_array_equal(g.slice_cols(cat, start, start + p.shape[1]).value, p)
        start += p.shape[1]


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 6), st.integers(1, 6), st.integers(1, 6), st.integers(0, 9999))
def test_shape_algebra(m, k, n, seed):
    rng = np.random.default_rng(seed)
    g = Graph()
    a = g.constant(rng.normal(size=(m, k)))
    b = g.constant(rng.normal(size=(k, n)))
    assert g.matmul(a, b).shape == (m, n)
    assert g.transpose(a).shape == (k, m)
    assert g.add(a, g.constant(np.zeros(k))).shape == (m, k)
    assert g.relu(a).shape == (m, k)
    assert g.softmax_rows(a).shape == (m, k)
    assert g.pad_cols(a, 2).shape == (m, k + 2)
    assert g.reshape(a, (k, m)).shape == (k, m)
    assert g.sum_all(a).shape == ()


def test_dropout_modes():
    g = Graph(np.float64)
    x = g.constant(np.ones((200, 50)))
    rng = np.random.default_rng(0)
    assert g.dropout(x, 0.5, "infer", rng) is x
    y = g.dropout(x, 0.5, "train", rng).value
    assert set(np.unique(y)) <= {0.0, 2.0}
    assert abs(y.mean() - 1.0) < 0.05
    with pytest.raises(ConfigError):
        g.dropout(x, 1.0, "train", rng)
    with pytest.raises(ConfigError):
        g.dropout(x, -0.1, "train", rng)


def test_non_finite_is_surfaced():
    g = Graph()
    with pytest.raises(NumericError):
        g.constant([np.inf])
    with pytest.raises(NumericError):
        g.batchnorm1d(g.constant([[1.0], [1.0]]), g.param("g", [1.0]), g.param("b", [0.0]), eps=0.0)


# -- gradients -----------------------------------------------------------------


def test_backward_requires_scalar():
    g = Graph()
    w = g.param("w", np.ones((2, 2)))
    with pytest.raises(UsageError):
        backward(g, w)


def test_grad_of_sum_wx():
    x = np.array([[1.0, 2.0, 3.0]])
    g = Graph(np.float64)
    w = g.param("w", np.random.default_rng(0).normal(size=(4, 3)))
    loss = g.sum_all(g.matmul(g.constant(x), g.transpose(w)))
    grad = backward(g, loss)["w"]
    np.testing.assert_allclose(grad, np.tile(x, (4, 1)))


def test_grad_of_unused_param_is_zero():
    g = Graph()
    g.param("p", np.ones(3))
    w = g.param("w", np.ones(3))
    grads = backward(g, g.sum_all(w))
    np.testing.assert_array_equal(grads["p"], np.zeros(3))


def test_two_layer_net_matches_finite_differences():
    rng = np.random.default_rng(42)
    x = rng.normal(size=(3, 2))
    params = {"w1": rng.normal(size=(2, 2)), "b1": rng.normal(size=2),
              "w2": rng.normal(size=(1, 2))}
    assert sum(p.size for p in params.values()) == 8

    def build():
        g = Graph(np.float64)
        p = {k: g.param(k, v) for k, v in params.items()}
        h = g.relu(g.add(g.matmul(g.constant(x), g.transpose(p["w1"])), p["b1"]))
        y = g.matmul(h, g.transpose(p["w2"]))
        return g, g.sum_all(y)

    g, loss = build()
    analytic = backward(g, loss)
    numeric = central_diff(lambda: float(build()[1].value), list(params.values()))
    for name, num in zip(params, numeric):
        assert rel_err(analytic[name], num) < 1e-4, name


OPS = {
    "relu": lambda g, a: g.relu(a),
    "softmax": lambda g, a: g.softmax_rows(a),
    "transpose": lambda g, a: g.transpose(a),
    "reshape": lambda g, a: g.reshape(a, (a.shape[1], a.shape[0])),
    "pad": lambda g, a: g.pad_cols(a, 2),
    "slice": lambda g, a: g.slice_cols(a, 1, 3),
    "dropout": lambda g, a: g.dropout(a, 0.3, "train", np.random.default_rng(7)),
}


@pytest.mark.parametrize("op", sorted(OPS))
def test_unary_op_gradients(op):
    rng = np.random.default_rng(11)
    x = rng.normal(size=(4, 5))
    # keep relu inputs away from the kink
    x[np.abs(x) < 0.05] = 0.3
    weights = rng.normal(size=OPS[op](Graph(np.float64), Graph(np.float64).constant(x)).shape)

    def build():
        g = Graph(np.float64)
        a = g.param("x", x)
        out = OPS[op](g, a)
        w = g.constant(weights.reshape(-1, 1))
        flat = g.reshape(out, (1, out.value.size))
        return g, g.sum_all(g.matmul(flat, w))

    g, loss = build()
    (num,) = central_diff(lambda: float(build()[1].value), [x])
    assert rel_err(backward(g, loss)["x"], num) < 1e-4


@pytest.mark.parametrize("mode", ["train", "infer"])
def test_batchnorm_gradients(mode):
    rng = np.random.default_rng(12)
    x, gamma, beta = rng.normal(size=(5, 3)), rng.normal(size=3), rng.normal(size=3)
    weights = rng.normal(size=(15, 1))
    running = RunningStats(rng.normal(size=3), rng.uniform(0.5, 2, size=3))

    def build():
        g = Graph(np.float64)
        p = [g.param("x", x), g.param("gamma", gamma), g.param("beta", beta)]
        rs = RunningStats(running.mean.copy(), running.var.copy())
        out = g.batchnorm1d(*p, mode=mode, running=rs)
        return g, g.sum_all(g.matmul(g.reshape(out, (1, 15)), g.constant(weights)))

    g, loss = build()
    grads = backward(g, loss)
    for name, num in zip(["x", "gamma", "beta"],
                         central_diff(lambda: float(build()[1].value), [x, gamma, beta])):
        assert rel_err(grads[name], num) < 1e-4, name


def test_attention_and_matmul_batched_gradients():
    rng = np.random.default_rng(13)
    q, k, v = (rng.normal(size=(2, 4, 3)) for _ in range(3))
    w = rng.normal(size=(3, 2))
    weights = rng.normal(size=(16, 1))

    def build():
        g = Graph(np.float64)
        p = [g.param(n, a) for n, a in zip("qkvw", (q, k, v, w))]
        att = g.scaled_dot_attention(p[0], p[1], p[2])
        out = g.matmul(att, p[3])
        return g, g.sum_all(g.matmul(g.reshape(out, (1, 16)), g.constant(weights)))

    g, loss = build()
    grads = backward(g, loss)
    for name, num in zip("qkvw", central_diff(lambda: float(build()[1].value), [q, k, v, w])):
        assert rel_err(grads[name], num) < 1e-4, name


def test_concat_add_and_cross_entropy_gradients():
    rng = np.random.default_rng(14)
    a, b, bias = rng.normal(size=(4, 2)), rng.normal(size=(4, 3)), rng.normal(size=5)
    y = np.eye(5)[[0, 3, 1, 4]]

    def build():
        g = Graph(np.float64)
        pa, pb, pbias = g.param("a", a), g.param("b", b), g.param("bias", bias)
        logits = g.add(g.concat_cols([pa, pb]), pbias)
        return g, g.cross_entropy(g.softmax_rows(logits), y)

    g, loss = build()
    grads = backward(g, loss)
    for name, num in zip(["a", "b", "bias"], central_diff(lambda: float(build()[1].value), [a, b, bias])):
        assert rel_err(grads[name], num) < 1e-4, name


def test_cross_entropy_shape_check():
    g = Graph()
    with pytest.raises(ShapeError):
        g.cross_entropy(g.constant(np.full((2, 3), 1 / 3)), np.eye(2))
