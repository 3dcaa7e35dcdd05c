import numpy as np
import pytest

from chunklm.attention import MAX_ATTENTION_LEN, QuadraticGuardError, attn_forward, init_attention
from chunklm.numerics import grad_check, ops
from chunklm.numerics.tensor import live_floats, no_grad, peak_floats, reset_peak

from conftest import probe_sum


def test_single_token_attends_to_itself():
    p = init_attention(d=4, seed=0)
    tok = np.array([[42]])
    logits, w = attn_forward(tok, p, return_weights=True)
    assert w.data.shape == (1, 1, 1) and w.data[0, 0, 0] == 1.0
    v = p.embed.data[42] @ p.W_v.data
    np.testing.assert_allclose(logits.data[0, 0], v @ p.W_lm.data, rtol=1e-13)


def test_zero_query_key_is_causal_mean():
    p = init_attention(d=4, seed=1)
    p.W_q.data[:] = 0.0
    p.W_k.data[:] = 0.0
    toks = np.array([[3, 9, 200]])
    logits, w = attn_forward(toks, p, return_weights=True)
    v = p.embed.data[toks[0]] @ p.W_v.data
    ctx = np.stack([v[: t + 1].mean(axis=0) for t in range(3)])
    np.testing.assert_allclose(logits.data[0], ctx @ p.W_lm.data, rtol=1e-12)
    np.testing.assert_allclose(w.data[0], [[1, 0, 0], [0.5, 0.5, 0], [1 / 3, 1 / 3, 1 / 3]], atol=1e-15)


def test_causality():
    p = init_attention(d=8, seed=2)
    r = np.random.default_rng(2)
    for _ in range(10):
        toks = r.integers(0, 256, size=(1, 12))
        t = int(r.integers(0, 12))
        alt = toks.copy()
        alt[0, t] = (alt[0, t] + 7) % 256
        a, b = attn_forward(toks, p).data, attn_forward(alt, p).data
        np.testing.assert_array_equal(a[0, :t], b[0, :t])


def test_weights_normalized_and_masked():
    p = init_attention(d=8, seed=3)
    _, w = attn_forward(np.random.default_rng(3).integers(0, 256, size=(2, 9)), p, return_weights=True)
    np.testing.assert_allclose(w.data.sum(axis=-1), 1.0, atol=1e-6)
    assert np.all(w.data[:, np.triu_indices(9, 1)[0], np.triu_indices(9, 1)[1]] == 0.0)


def _peak(n, p):
    toks = np.random.default_rng(n).integers(0, 256, size=n)
    with no_grad():
        base = live_floats()
        reset_peak()
        out = attn_forward(toks, p)
        peak = peak_floats() - base
        del out
    return peak


def test_peak_grows_quadratically():
    p = init_attention(d=8, seed=0)
    small, large = _peak(256, p), _peak(512, p)
    # linear terms double; the n x n terms quadruple
    assert large / small > 3.5


def test_guard_refuses_long_input():
    p = init_attention(d=2, seed=0)
    with pytest.raises(QuadraticGuardError):
        attn_forward(np.zeros(MAX_ATTENTION_LEN + 1, dtype=int), p)


def test_gradcheck():
    p = init_attention(d=4, seed=4)
    toks = np.random.default_rng(4).integers(0, 256, size=(2, 5))
    err = grad_check(lambda: probe_sum(attn_forward(toks, p)), p.named(), probes=80)
    assert err < 1e-6
