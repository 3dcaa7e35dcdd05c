"""GRU cell carrying the global state across chunks."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import ops
from .numerics.tensor import Tensor

GRU_NAMES = ("W_z", "W_r", "W_h", "U_z", "U_r", "U_h", "b_z", "b_r", "b_h")


@dataclass
class GruParams:
    W_z: Tensor
    W_r: Tensor
    W_h: Tensor
    U_z: Tensor
    U_r: Tensor
    U_h: Tensor
    b_z: Tensor
    b_r: Tensor
    b_h: Tensor

    def tensors(self):
        return {n: getattr(self, n) for n in GRU_NAMES}

    @property
    def d_in(self):
        return self.W_z.shape[0]

    @property
    def d_h(self):
        return self.U_z.shape[0]


def init_gru(d_in, d_h, rng, dtype=np.float64) -> GruParams:
    def w(rows):
        return Tensor(rng.normal(0.0, 1.0 / np.sqrt(rows), size=(rows, d_h)).astype(dtype), requires_grad=True)

    def zeros():
        return Tensor(np.zeros(d_h, dtype=dtype), requires_grad=True)

    return GruParams(w(d_in), w(d_in), w(d_in), w(d_h), w(d_h), w(d_h), zeros(), zeros(), zeros())


def init_state(B, d_h, dtype=np.float64) -> Tensor:
    return Tensor(np.zeros((B, d_h), dtype=dtype), op="init_state")


def gru_cell(x: Tensor, h: Tensor, p: GruParams) -> Tensor:
    """z = s(xWz + hUz + bz); r = s(xWr + hUr + br);
    h~ = tanh(xWh + (r*h)Uh + bh); h' = (1 - z)*h + z*h~."""
    if x.shape[-1] != p.d_in or h.shape[-1] != p.d_h or x.shape[0] != h.shape[0]:
        raise ValueError(f"gru_cell shape mismatch: x {x.shape}, h {h.shape}, params ({p.d_in}, {p.d_h})")
    z = ops.sigmoid(ops.add(ops.add(ops.matmul(x, p.W_z), ops.matmul(h, p.U_z)), p.b_z))
    r = ops.sigmoid(ops.add(ops.add(ops.matmul(x, p.W_r), ops.matmul(h, p.U_r)), p.b_r))
    cand = ops.tanh(ops.add(ops.add(ops.matmul(x, p.W_h), ops.matmul(ops.mul(r, h), p.U_h)), p.b_h))
    return ops.add(h, ops.mul(z, ops.sub(cand, h)))
