import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.special import erf, logsumexp

from chunklm.numerics import (
    ConfigError,
    NumericError,
    Tensor,
    adamw_step,
    add,
    causal_conv1d,
    causal_softmax,
    clip_grad_norm,
    concat,
    cross_entropy,
    elementwise,
    embedding,
    exp,
    gelu,
    grad_check,
    init_moments,
    live_floats,
    lr_at,
    matmul,
    mean_pool_tokens,
    mul,
    no_grad,
    reshape,
    sigmoid,
    softmax,
    square,
    sub,
    tanh,
    tensor_sum,
    transpose,
)
from chunklm.numerics.ops import IGNORE_INDEX

from conftest import leaf, probe_sum


# ---------------------------------------------------------------- matmul


def test_matmul_identity():
    out = matmul(leaf(np.eye(2)), leaf([[5.0], [6.0]]))
    np.testing.assert_array_equal(out.data, [[5.0], [6.0]])


def test_matmul_zero(rng):
    out = matmul(leaf(np.zeros((2, 3))), leaf(rng.standard_normal((3, 4))))
    np.testing.assert_array_equal(out.data, np.zeros((2, 4)))


def test_matmul_hand_value():
    out = matmul(leaf([[1.0, 2.0], [3.0, 4.0]]), leaf([[5.0], [6.0]]))
    np.testing.assert_array_equal(out.data, [[17.0], [39.0]])


def test_matmul_shape_mismatch():
    with pytest.raises(ValueError):
        matmul(leaf(np.ones((2, 3))), leaf(np.ones((2, 3))))


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 5), st.integers(1, 5), st.integers(1, 5), st.integers(1, 5), st.integers(0, 10_000))
def test_matmul_associative(m, k, p, q, seed):
    r = np.random.default_rng(seed)
    a, b, c = (leaf(r.standard_normal(s)) for s in ((m, k), (k, p), (p, q)))
    left = matmul(matmul(a, b), c).data
    right = matmul(a, matmul(b, c)).data
    np.testing.assert_allclose(left, right, atol=1e-10, rtol=0)


# ---------------------------------------------------------------- causal conv


def test_conv_single_tap_identity(rng):
    x = leaf(rng.standard_normal((2, 6, 3)))
    out = causal_conv1d(x, leaf(np.ones((1, 3))))
    np.testing.assert_array_equal(out.data, x.data)


def test_conv_shift(rng):
    x = leaf(rng.standard_normal((1, 5, 2)))
    out = causal_conv1d(x, leaf([[0.0, 0.0], [1.0, 1.0]]), dilation=1)
    np.testing.assert_array_equal(out.data[0, 0], 0.0)
    np.testing.assert_array_equal(out.data[0, 1:], x.data[0, :-1])


def test_conv_impulse_dilation2():
    x = np.zeros((1, 8, 1))
    x[0, 0, 0] = 1.0
    a, b, c = 0.3, -1.7, 2.5
    out = causal_conv1d(leaf(x), leaf([[a], [b], [c]]), dilation=2).data[0, :, 0]
    expect = np.zeros(8)
    expect[[0, 2, 4]] = [a, b, c]
    np.testing.assert_array_equal(out, expect)


def test_conv_matches_direct_oracle(rng):
    x = rng.standard_normal((2, 11, 3))
    k = rng.standard_normal((4, 3))
    out = causal_conv1d(leaf(x), leaf(k), dilation=3).data
    ref = np.zeros_like(x)
    for t in range(11):
        for j in range(4):
            if t - 3 * j >= 0:
                ref[:, t] += k[j] * x[:, t - 3 * j]
    np.testing.assert_allclose(out, ref, atol=1e-12)


@pytest.mark.parametrize("dilation", [0, -1, 1.5])
def test_conv_bad_dilation(dilation):
    with pytest.raises(ConfigError):
        causal_conv1d(leaf(np.ones((1, 4, 1))), leaf(np.ones((2, 1))), dilation=dilation)


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 12), st.integers(1, 4), st.integers(1, 4), st.integers(0, 10_000), st.data())
def test_conv_causality(c, taps, dilation, seed, data):
    t = data.draw(st.integers(0, c - 1))
    r = np.random.default_rng(seed)
    x = r.standard_normal((1, c, 2))
    k = leaf(r.standard_normal((taps, 2)))
    y = x.copy()
    y[0, t] += 1.0 + r.random()
    a = causal_conv1d(leaf(x), k, dilation).data
    b = causal_conv1d(leaf(y), k, dilation).data
    np.testing.assert_array_equal(a[0, :t], b[0, :t])


def test_dense_conv_matches_depthwise_on_diagonal(rng):
    x = rng.standard_normal((2, 7, 3))
    k = rng.standard_normal((3, 3))
    dense = np.stack([np.diag(row) for row in k])
    a = causal_conv1d(leaf(x), leaf(k), 2).data
    b = causal_conv1d(leaf(x), leaf(dense), 2, depthwise=False).data
    np.testing.assert_allclose(a, b, atol=1e-12)


# ---------------------------------------------------------------- pooling / softmax


def test_pool_constant_rows():
    v = np.array([1.5, -2.0, 3.0])
    x = np.broadcast_to(v, (2, 5, 3)).copy()
    np.testing.assert_allclose(mean_pool_tokens(leaf(x)).data, np.broadcast_to(v, (2, 3)))


def test_pool_singleton(rng):
    x = rng.standard_normal((3, 1, 4))
    np.testing.assert_array_equal(mean_pool_tokens(leaf(x)).data, x[:, 0])


def test_pool_hand_average():
    out = mean_pool_tokens(leaf([[[1.0, 0.0], [0.0, 1.0]]])).data
    np.testing.assert_array_equal(out, [[0.5, 0.5]])


def test_softmax_uniform():
    np.testing.assert_allclose(softmax(leaf(np.full(4, 2.0))).data, [0.25] * 4)


def test_softmax_closed_form():
    np.testing.assert_allclose(softmax(leaf([0.0, math.log(3.0)])).data, [0.25, 0.75], atol=1e-15)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=1, max_size=12), st.floats(-100, 100))
def test_softmax_sums_to_one_and_shift_invariant(z, shift):
    z = np.array(z)
    p = softmax(leaf(z)).data
    assert abs(p.sum() - 1.0) < 1e-6
    np.testing.assert_allclose(softmax(leaf(z + shift)).data, p, atol=1e-12)


def test_causal_softmax_masks_future(rng):
    w = causal_softmax(leaf(rng.standard_normal((1, 5, 5)))).data[0]
    assert np.all(w[np.triu_indices(5, 1)] == 0.0)
    np.testing.assert_allclose(w.sum(axis=-1), 1.0, atol=1e-12)


# ---------------------------------------------------------------- cross entropy


def test_ce_uniform_logits():
    loss = cross_entropy(leaf(np.zeros((3, 256))), [0, 17, 255]).item()
    assert abs(loss - math.log(256)) < 1e-12
    assert abs(loss - 5.5452) < 1e-4


def test_ce_confident_limit():
    z = np.zeros((2, 5))
    z[0, 3] = z[1, 1] = 30.0
    assert cross_entropy(leaf(z), [3, 1]).item() < 1e-9


def test_ce_matches_logsumexp_oracle(rng):
    z = rng.standard_normal((3, 5))
    t = np.array([4, 0, 2])
    ref = np.mean([logsumexp(z[i]) - z[i, t[i]] for i in range(3)])
    assert abs(cross_entropy(leaf(z), t).item() - ref) < 1e-12


def test_ce_ignores_masked_rows(rng):
    z = rng.standard_normal((4, 6))
    full = cross_entropy(leaf(z[:2]), [1, 2]).item()
    masked = cross_entropy(leaf(z), [1, 2, IGNORE_INDEX, IGNORE_INDEX]).item()
    assert abs(full - masked) < 1e-14


def test_ce_bad_target():
    with pytest.raises(IndexError):
        cross_entropy(leaf(np.zeros((1, 4))), [4])


# ---------------------------------------------------------------- elementwise


def test_elementwise_centers():
    assert elementwise("tanh", leaf([0.0])).data[0] == 0.0
    assert elementwise("sigmoid", leaf([0.0])).data[0] == 0.5


@settings(max_examples=50, deadline=None)
@given(st.floats(-20, 20))
def test_tanh_odd(x):
    assert tanh(leaf([-x])).data[0] == -tanh(leaf([x])).data[0]


def test_gelu_erf_oracle():
    x = 1.0
    ref = x * 0.5 * (1.0 + erf(x / math.sqrt(2.0)))
    out = elementwise("gelu", leaf([x])).data[0]
    assert abs(out - ref) < 1e-15
    assert abs(out - 0.8412) < 2e-4  # 0.841345 to six places


def test_elementwise_unknown_tag():
    with pytest.raises(ValueError):
        elementwise("relu", leaf([1.0]))


# ---------------------------------------------------------------- nan policy / tape


def test_nan_names_the_op():
    with np.errstate(over="ignore"), pytest.raises(NumericError, match="exp"):
        exp(leaf([1e6]))


def test_backward_visits_shared_node_once():
    x = leaf([2.0])
    y = mul(x, x)  # x used twice
    z = add(y, y)
    tensor_sum(z).backward()
    np.testing.assert_array_equal(x.grad, [8.0])


def test_no_grad_records_nothing():
    x = leaf([1.0, 2.0])
    with no_grad():
        y = mul(x, x)
    assert y.backward_fn is None and not y.parents


def test_live_float_counter_tracks_allocations():
    base = live_floats()
    t = Tensor(np.zeros(1000))
    assert live_floats() == base + 1000
    del t
    assert live_floats() == base


# ---------------------------------------------------------------- adamw / schedule


def _one_param(value, grad):
    params = {"w": np.array(value, dtype=np.float64)}
    grads = {"w": np.array(grad, dtype=np.float64)}
    return params, grads, init_moments(params)


def test_adamw_zero_grad_fixed_point():
    params, grads, mom = _one_param([1.0, -2.0], [0.0, 0.0])
    adamw_step(params, grads, mom, 1, lr=0.01)
    np.testing.assert_array_equal(params["w"], [1.0, -2.0])
    np.testing.assert_array_equal(mom["m"]["w"], 0.0)
    np.testing.assert_array_equal(mom["v"]["w"], 0.0)


def test_adamw_decay_only():
    params, grads, mom = _one_param([1.0, -2.0], [0.0, 0.0])
    adamw_step(params, grads, mom, 1, lr=0.01, weight_decay=0.1)
    np.testing.assert_allclose(params["w"], np.array([1.0, -2.0]) * 0.999, rtol=1e-15)


def test_adamw_first_step_is_sign_step():
    g = np.array([0.3, -4.0])
    params, grads, mom = _one_param([0.0, 0.0], g)
    adamw_step(params, grads, mom, 1, lr=0.01, eps=1e-9)
    np.testing.assert_allclose(params["w"], -0.01 * g / (np.abs(g) + 1e-9), rtol=1e-12)


def test_adamw_decay_mask():
    params = {"w": np.ones((2, 2)), "b": np.ones(2)}
    grads = {k: np.zeros_like(v) for k, v in params.items()}
    adamw_step(params, grads, init_moments(params), 1, lr=0.1, weight_decay=0.5, decay_mask={"w": True, "b": False})
    np.testing.assert_allclose(params["w"], 0.95)
    np.testing.assert_array_equal(params["b"], 1.0)


@pytest.mark.parametrize("lr,step", [(0.0, 1), (-1.0, 1), (0.1, 0)])
def test_adamw_rejects_bad_args(lr, step):
    params, grads, mom = _one_param([1.0], [1.0])
    with pytest.raises(ConfigError):
        adamw_step(params, grads, mom, step, lr)


def test_clip_grad_norm():
    grads = {"a": np.array([3.0]), "b": np.array([4.0])}
    assert clip_grad_norm(grads, 1.0) == 5.0
    np.testing.assert_allclose([grads["a"][0], grads["b"][0]], [0.6, 0.8], rtol=1e-10)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 50), st.integers(0, 200))
def test_lr_schedule(warmup, extra):
    max_steps = warmup + extra
    peak = 1e-3
    for s in range(1, max_steps + 1):
        lr = lr_at(s, peak, warmup, max_steps)
        if s <= warmup:
            assert lr == peak * s / warmup
        else:
            assert lr == pytest.approx(peak * (max_steps - s) / (max_steps - warmup))
    assert lr_at(max_steps, peak, warmup, max_steps) == (peak if extra == 0 else 0.0)


# ---------------------------------------------------------------- grad_check


def test_gradcheck_quadratic(rng):
    x = leaf(rng.standard_normal(6))
    assert grad_check(lambda: tensor_sum(square(x)), [x], probes=6) < 1e-8


def test_gradcheck_softmax_ce(rng):
    z = leaf(rng.standard_normal((2, 3)))
    f = lambda: cross_entropy(reshape(softmax(z), (2, 3)), [0, 2])  # noqa: E731
    assert grad_check(f, [z], probes=6) < 1e-6


def test_gradcheck_constant(rng):
    x = leaf(rng.standard_normal(3))
    assert grad_check(lambda: Tensor(np.asarray(4.0)), [x], probes=3) < 1e-10


def test_gradcheck_detects_wrong_gradient(rng):
    from chunklm.numerics import make_op

    x = leaf(rng.standard_normal(4))

    def bad_square(a):
        return make_op(a.data**2, (a,), lambda g: (3.0 * a.data * g,), "bad_square")

    assert grad_check(lambda: tensor_sum(bad_square(x)), [x], probes=4) > 1e-2


def _op_cases(r):
    a3 = lambda *s: leaf(r.standard_normal(s))  # noqa: E731
    x, y = a3(2, 3, 4), a3(2, 3, 4)
    w = a3(4, 5)
    b2, c2 = a3(3, 4), a3(4, 2)
    bx, by = a3(2, 3, 4), a3(2, 4, 3)
    k = a3(3, 4)
    kd = a3(2, 4, 3)
    emb = a3(7, 3)
    ids = r.integers(0, 7, size=(2, 5))
    z = a3(4, 6)
    tgt = r.integers(0, 6, size=4)
    col = a3(1, 3, 1)
    sq = a3(2, 4, 4)
    return {
        "add": ([x, y], lambda: add(x, y)),
        "add_broadcast": ([x, col], lambda: add(x, col)),
        "sub": ([x, y], lambda: sub(x, y)),
        "mul": ([x, col], lambda: mul(x, col)),
        "exp": ([x], lambda: exp(x)),
        "square": ([x], lambda: square(x)),
        "reshape": ([x], lambda: reshape(x, (6, 4))),
        "transpose": ([x], lambda: transpose(x, (2, 0, 1))),
        "concat": ([x, y], lambda: concat([x, y], axis=1)),
        "matmul_2d": ([b2, c2], lambda: matmul(b2, c2)),
        "matmul_batched_rhs2d": ([x, w], lambda: matmul(x, w)),
        "matmul_batched": ([bx, by], lambda: matmul(bx, by)),
        "embedding": ([emb], lambda: embedding(emb, ids)),
        "tanh": ([x], lambda: tanh(x)),
        "sigmoid": ([x], lambda: sigmoid(x)),
        "gelu": ([x], lambda: gelu(x)),
        "conv_depthwise": ([x, k], lambda: causal_conv1d(x, k, 2)),
        "conv_dense": ([x, kd], lambda: causal_conv1d(x, kd, 1, depthwise=False)),
        "mean_pool": ([x], lambda: mean_pool_tokens(x)),
        "softmax": ([z], lambda: softmax(z)),
        "causal_softmax": ([sq], lambda: causal_softmax(sq)),
        "cross_entropy": ([z], lambda: cross_entropy(z, tgt)),
        "cross_entropy_weighted": ([z], lambda: cross_entropy(z, tgt, weights=np.array([0.1, 0.2, 0.3, 0.4]))),
    }


OP_NAMES = list(_op_cases(np.random.default_rng(0)))


@pytest.mark.parametrize("name", OP_NAMES)
def test_every_op_gradcheck(name):
    for seed in range(3):
        params, fn = _op_cases(np.random.default_rng(seed))[name]
        err = grad_check(lambda: probe_sum(fn(), seed), params, probes=30, seed=seed)
        assert err < 1e-6, f"{name} seed {seed}: {err}"
