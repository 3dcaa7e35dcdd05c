"""Parallel dilated causal convolutions summed into one local representation."""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .numerics import ops
from .numerics.optim import ConfigError
from .numerics.tensor import Tensor


@dataclass
class MultiResParams:
    kernels: list  # one [taps, d] Tensor per branch
    dilations: tuple
    mix: Tensor  # [d, d] pointwise mix

    def __post_init__(self):
        if not self.kernels:
            raise ConfigError("multi-resolution block needs at least one branch")
        if len(self.kernels) != len(self.dilations):
            raise ConfigError("one dilation per branch kernel")
        if any(d < 1 for d in self.dilations):
            raise ConfigError(f"dilations must be >= 1, got {self.dilations}")
        if any(b <= a for a, b in zip(self.dilations, self.dilations[1:])):
            raise ConfigError(f"dilations must be strictly increasing, got {self.dilations}")

    @property
    def K(self) -> int:
        return len(self.kernels)

    @property
    def taps(self) -> int:
        return self.kernels[0].shape[0]

    def tensors(self):
        out = {f"kernel{i}": k for i, k in enumerate(self.kernels)}
        out["mix"] = self.mix
        return out


def init_multires(d, dilations, taps, rng, dtype=np.float64, scale=0.02) -> MultiResParams:
    kernels = [
        Tensor(rng.normal(0.0, scale, size=(taps, d)).astype(dtype), requires_grad=True) for _ in dilations
    ]
    return MultiResParams(kernels, tuple(dilations), Tensor(np.eye(d, dtype=dtype), requires_grad=True))


def receptive_field(p: MultiResParams) -> int:
    return 1 + (p.taps - 1) * max(p.dilations)


def multires_forward(x: Tensor, p: MultiResParams) -> Tensor:
    """(x + gelu(sum_k conv(x, kernel_k, d_k))) @ mix"""
    c = x.shape[1]
    if receptive_field(p) - 1 >= c:
        warnings.warn(f"receptive field {receptive_field(p)} exceeds chunk length {c}", stacklevel=2)
    total = None
    for kern, dil in zip(p.kernels, p.dilations):
        z = ops.causal_conv1d(x, kern, dilation=dil)
        total = z if total is None else ops.add(total, z)
    return ops.matmul(ops.add(x, ops.gelu(total)), p.mix)
