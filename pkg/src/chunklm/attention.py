"""Single-layer, single-head causal softmax attention LM.

Exists only as the quadratic-cost contrast for the scaling benchmark: the
full n x n score matrix is materialized on purpose.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import ops
from .numerics.tensor import Tensor

MAX_ATTENTION_LEN = 16384


class QuadraticGuardError(MemoryError):
    pass


@dataclass
class AttnParams:
    embed: Tensor
    W_q: Tensor
    W_k: Tensor
    W_v: Tensor
    W_lm: Tensor

    def named(self):
        return {"embed": self.embed, "W_q": self.W_q, "W_k": self.W_k, "W_v": self.W_v, "W_lm": self.W_lm}


def init_attention(d=128, V=256, seed=0, dtype=np.float64) -> AttnParams:
    rng = np.random.default_rng(seed)

    def leaf(shape, std):
        return Tensor(rng.normal(0.0, std, size=shape).astype(dtype), requires_grad=True)

    s = 1.0 / np.sqrt(d)
    return AttnParams(leaf((V, d), 1.0), leaf((d, d), s), leaf((d, d), s), leaf((d, d), s), leaf((d, V), s))


def attn_forward(tokens, p: AttnParams, return_weights=False):
    """Logits [B, n, V] from causal scaled dot-product attention over the whole input."""
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.ndim == 1:
        tokens = tokens[None, :]
    n = tokens.shape[1]
    if n > MAX_ATTENTION_LEN:
        raise QuadraticGuardError(
            f"refusing n={n}: the score matrix alone needs {n}x{n} = {n * n} floats per sequence "
            f"(guard is n <= {MAX_ATTENTION_LEN})"
        )
    d = p.W_q.shape[0]
    x = ops.embedding(p.embed, tokens)
    q = ops.mul(ops.matmul(x, p.W_q), 1.0 / np.sqrt(d))
    kt = ops.transpose(ops.matmul(x, p.W_k), (0, 2, 1))
    v = ops.matmul(x, p.W_v)
    del x
    scores = ops.matmul(q, kt)
    del q, kt
    weights = ops.causal_softmax(scores)
    del scores
    ctx = ops.matmul(weights, v)
    logits = ops.matmul(ctx, p.W_lm)
    if return_weights:
        return logits, weights
    return logits
