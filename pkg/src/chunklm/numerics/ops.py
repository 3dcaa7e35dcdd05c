"""Differentiable ops over :class:`Tensor`.

Every op computes its forward result with numpy and records a closure that
maps the output gradient back to its inputs.
"""
from __future__ import annotations

import math

import numpy as np
from scipy.special import erf, expit

from . import kernels
from .optim import ConfigError
from .tensor import Tensor, make_op

IGNORE_INDEX = 65535

_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def _t(x, like=None):
    if isinstance(x, Tensor):
        return x
    dtype = like.data.dtype if like is not None else np.float64
    return Tensor(np.asarray(x, dtype=dtype), op="const")


def _unbroadcast(g, shape):
    """Sum ``g`` down to ``shape`` (reverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# --------------------------------------------------------------------------
# arithmetic
# --------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a = _t(a, b if isinstance(b, Tensor) else None)
    b = _t(b, a)
    sa, sb = a.shape, b.shape

    def backward(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return make_op(a.data + b.data, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a = _t(a, b if isinstance(b, Tensor) else None)
    b = _t(b, a)
    sa, sb = a.shape, b.shape

    def backward(g):
        return _unbroadcast(g, sa), _unbroadcast(-g, sb)

    return make_op(a.data - b.data, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    a = _t(a, b if isinstance(b, Tensor) else None)
    b = _t(b, a)
    ad, bd = a.data, b.data

    def backward(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return make_op(ad * bd, (a, b), backward, "mul")


def neg(a: Tensor) -> Tensor:
    return make_op(-a.data, (a,), lambda g: (-g,), "neg")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return make_op(out, (a,), lambda g: (g * out,), "exp")


def tensor_sum(a: Tensor) -> Tensor:
    shape, dtype = a.shape, a.dtype

    def backward(g):
        return (np.broadcast_to(g, shape).astype(dtype),)

    return make_op(np.asarray(a.data.sum()), (a,), backward, "sum")


def square(a: Tensor) -> Tensor:
    ad = a.data
    return make_op(ad * ad, (a,), lambda g: (2.0 * ad * g,), "square")


# --------------------------------------------------------------------------
# shape
# --------------------------------------------------------------------------


def reshape(a: Tensor, shape) -> Tensor:
    orig = a.shape
    return make_op(a.data.reshape(shape), (a,), lambda g: (g.reshape(orig),), "reshape")


def transpose(a: Tensor, axes) -> Tensor:
    inv = np.argsort(axes)
    return make_op(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),), "transpose")


def concat(tensors, axis=-1) -> Tensor:
    tensors = tuple(tensors)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return make_op(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward, "concat")


def detach(a: Tensor) -> Tensor:
    return Tensor(a.data, op="detach")


# --------------------------------------------------------------------------
# linear algebra
# --------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; ``a`` may carry leading batch axes when ``b`` is 2-D.

    dA = dOut @ B^T, dB = A^T @ dOut.
    """
    a, b = _t(a), _t(b)
    if a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
        raise ValueError(f"matmul dimension mismatch: {a.shape} x {b.shape}")
    ad, bd = a.data, b.data
    if bd.ndim == 2 and ad.ndim > 2:
        lead = ad.shape[:-1]
        a2 = ad.reshape(-1, ad.shape[-1])
        out = (a2 @ bd).reshape(*lead, bd.shape[1])

        def backward(g):
            g2 = g.reshape(-1, g.shape[-1])
            return (g2 @ bd.T).reshape(ad.shape), a2.T @ g2

        return make_op(out, (a, b), backward, "matmul")

    def backward(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return make_op(ad @ bd, (a, b), backward, "matmul")


def embedding(weight: Tensor, ids) -> Tensor:
    """Row gather ``weight[ids]``."""
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= weight.shape[0]):
        raise IndexError(f"token id out of range [0, {weight.shape[0]})")
    V = weight.shape[0]

    def backward(g):
        flat = ids.reshape(-1)
        g2 = g.reshape(flat.size, -1)
        gw = np.zeros((V, g2.shape[1]), dtype=g.dtype)
        np.add.at(gw, flat, g2)
        return (gw,)

    return make_op(weight.data[ids], (weight,), backward, "embedding")


# --------------------------------------------------------------------------
# pointwise nonlinearities
# --------------------------------------------------------------------------


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return make_op(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def sigmoid(a: Tensor) -> Tensor:
    out = expit(a.data)
    return make_op(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def gelu(a: Tensor) -> Tensor:
    """Exact GELU, x * Phi(x)."""
    x = a.data
    cdf = 0.5 * (1.0 + erf(x / _SQRT2))
    pdf = _INV_SQRT_2PI * np.exp(-0.5 * x * x)

    def backward(g):
        return (g * (cdf + x * pdf),)

    return make_op(x * cdf, (a,), backward, "gelu")


_ELEMENTWISE = {"tanh": tanh, "sigmoid": sigmoid, "gelu": gelu}


def elementwise(tag: str, x: Tensor) -> Tensor:
    try:
        fn = _ELEMENTWISE[tag]
    except KeyError:
        raise ValueError(f"unknown elementwise op {tag!r}; expected one of {sorted(_ELEMENTWISE)}") from None
    return fn(x)


# --------------------------------------------------------------------------
# sequence ops
# --------------------------------------------------------------------------


def causal_conv1d(x: Tensor, kernel: Tensor, dilation: int = 1, depthwise: bool = True) -> Tensor:
    """Causal dilated convolution along axis 1 of a [B, c, d] input.

    Depthwise: ``kernel`` is [taps, d] and out[t] = sum_j kernel[j] * x[t - j*dilation].
    Dense (``depthwise=False``): ``kernel`` is [taps, d_in, d_out] and each tap is
    a matrix applied to the shifted input.
    """
    if int(dilation) != dilation or dilation < 1:
        raise ConfigError(f"dilation must be a positive integer, got {dilation}")
    dilation = int(dilation)
    if x.ndim != 3:
        raise ValueError(f"causal_conv1d expects [B, c, d] input, got shape {x.shape}")
    if not depthwise:
        return _dense_causal_conv(x, kernel, dilation)
    if kernel.ndim != 2 or kernel.shape[1] != x.shape[2]:
        raise ValueError(f"depthwise kernel must be [taps, {x.shape[2]}], got {kernel.shape}")
    if kernel.shape[0] < 1:
        raise ValueError("kernel needs at least one tap")
    xd = np.ascontiguousarray(x.data)
    kd = np.ascontiguousarray(kernel.data.astype(xd.dtype, copy=False))
    taps = kd.shape[0]

    def backward(g):
        g = np.ascontiguousarray(g)
        gx = kernels.conv_bwd_input(g, kd, dilation) if x.requires_grad else None
        gk = kernels.conv_bwd_kernel(g, xd, taps, dilation) if kernel.requires_grad else None
        return gx, gk

    return make_op(kernels.conv_fwd(xd, kd, dilation), (x, kernel), backward, "causal_conv1d")


def _dense_causal_conv(x, kernel, dilation):
    if kernel.ndim != 3 or kernel.shape[1] != x.shape[2]:
        raise ValueError(f"dense kernel must be [taps, {x.shape[2]}, d_out], got {kernel.shape}")
    xd, kd = x.data, kernel.data
    B, T, _ = xd.shape
    out = np.zeros((B, T, kd.shape[2]), dtype=xd.dtype)
    for j in range(kd.shape[0]):
        s = j * dilation
        if s >= T:
            break
        out[:, s:, :] += xd[:, : T - s, :] @ kd[j]

    def backward(g):
        gx = np.zeros_like(xd)
        gk = np.zeros_like(kd)
        for j in range(kd.shape[0]):
            s = j * dilation
            if s >= T:
                break
            gx[:, : T - s, :] += g[:, s:, :] @ kd[j].T
            gk[j] = np.einsum("bti,bto->io", xd[:, : T - s, :], g[:, s:, :])
        return gx, gk

    return make_op(out, (x, kernel), backward, "causal_conv1d")


def mean_pool_tokens(x: Tensor) -> Tensor:
    """[B, c, d] -> [B, d], the average over the token axis."""
    if x.ndim != 3:
        raise ValueError(f"mean_pool_tokens expects [B, c, d], got {x.shape}")
    c = x.shape[1]
    if c == 0:
        raise ValueError("cannot pool an empty chunk")
    shape = x.shape

    def backward(g):
        return (np.broadcast_to(g[:, None, :] / c, shape).copy(),)

    return make_op(x.data.mean(axis=1), (x,), backward, "mean_pool_tokens")


# --------------------------------------------------------------------------
# softmax / loss
# --------------------------------------------------------------------------


def _softmax_np(z, axis=-1):
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def softmax(logits: Tensor, axis: int = -1) -> Tensor:
    out = _softmax_np(logits.data, axis)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return make_op(out, (logits,), backward, "softmax")


def causal_softmax(scores: Tensor) -> Tensor:
    """Softmax over the last axis with entries above the diagonal forced to 0."""
    n_q, n_k = scores.shape[-2:]
    mask = np.triu(np.ones((n_q, n_k), dtype=bool), k=1)
    z = np.where(mask, -np.inf, scores.data)
    out = _softmax_np(z)

    def backward(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return make_op(out, (scores,), backward, "causal_softmax")


def cross_entropy(logits: Tensor, targets, weights=None) -> Tensor:
    """Mean negative log-likelihood of ``targets`` under softmax(logits).

    ``logits`` is [N, V]. Targets equal to IGNORE_INDEX are skipped. With
    ``weights`` (length N) the loss is sum_i w_i * nll_i instead of the mean
    over valid rows.
    """
    targets = np.asarray(targets).reshape(-1)
    N, V = logits.shape
    if targets.shape[0] != N:
        raise ValueError(f"got {targets.shape[0]} targets for {N} rows of logits")
    valid = targets != IGNORE_INDEX
    if np.any((targets[valid] < 0) | (targets[valid] >= V)):
        raise IndexError(f"target outside [0, {V})")
    z = logits.data
    zmax = z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z - zmax).sum(axis=1)) + zmax[:, 0]
    safe_t = np.where(valid, targets, 0)
    nll = lse - z[np.arange(N), safe_t]
    if weights is None:
        n_valid = int(valid.sum())
        w = valid / max(n_valid, 1)
    else:
        w = np.where(valid, np.asarray(weights, dtype=z.dtype), 0.0)
    w = w.astype(z.dtype)
    loss = np.asarray((w * nll).sum(), dtype=z.dtype)

    def backward(g):
        p = _softmax_np(z)
        p[np.arange(N), safe_t] -= 1.0
        return (p * (w * g)[:, None],)

    return make_op(loss, (logits,), backward, "cross_entropy")
