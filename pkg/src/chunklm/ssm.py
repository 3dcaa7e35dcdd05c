"""Diagonal state-space block.

Each channel runs dh/dt = a*h + b*x, y = c*h. Zero-order hold with step dt
gives abar = exp(a*dt), bbar = (abar - 1)/a * b, and the truncated impulse
response K[j] = c * abar**j * bbar is applied as a depthwise causal
convolution, followed by a sigmoid gate and a residual add.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import ops
from .numerics.kernels import ssm_scan
from .numerics.tensor import Tensor, make_op


@dataclass
class SSMParams:
    """``log_neg_a`` holds rho with a = -exp(rho); ``log_dt`` holds log(dt)."""

    log_neg_a: Tensor
    b: Tensor
    cvec: Tensor
    log_dt: Tensor
    gate_w: Tensor
    gate_b: Tensor
    taps: int

    def tensors(self):
        return {
            "log_neg_a": self.log_neg_a,
            "b": self.b,
            "cvec": self.cvec,
            "log_dt": self.log_dt,
            "gate_w": self.gate_w,
            "gate_b": self.gate_b,
        }

    def decay(self) -> Tensor:
        return ops.neg(ops.exp(self.log_neg_a))

    def dt(self) -> Tensor:
        return ops.exp(self.log_dt)


def init_ssm(d: int, taps: int, rng: np.random.Generator, dtype=np.float64) -> SSMParams:
    a = rng.uniform(0.01, 1.0, size=d)  # |a| in [0.01, 1]
    return SSMParams(
        log_neg_a=Tensor(np.log(a).astype(dtype), requires_grad=True),
        b=Tensor(rng.normal(0.0, 1.0 / np.sqrt(d), size=d).astype(dtype), requires_grad=True),
        cvec=Tensor(rng.normal(0.0, 1.0 / np.sqrt(d), size=d).astype(dtype), requires_grad=True),
        log_dt=Tensor(np.zeros(d, dtype=dtype), requires_grad=True),
        gate_w=Tensor(rng.normal(0.0, 1.0 / np.sqrt(d), size=(d, d)).astype(dtype), requires_grad=True),
        gate_b=Tensor(np.zeros(d, dtype=dtype), requires_grad=True),
        taps=taps,
    )


def _expm1_over(u):
    """(exp(u) - 1)/u with the u -> 0 limit of 1."""
    small = np.abs(u) < 1e-8
    safe = np.where(small, 1.0, u)
    return np.where(small, 1.0 + u / 2.0, np.expm1(safe) / safe)


def _dphi_du(u):
    """d/du of (exp(u)-1)/u, i.e. (u e^u - e^u + 1)/u^2; limit 1/2 at 0."""
    small = np.abs(u) < 1e-4
    safe = np.where(small, 1.0, u)
    exact = (safe * np.exp(safe) - np.expm1(safe)) / (safe * safe)
    series = 0.5 + u / 3.0 + u * u / 8.0
    return np.where(small, series, exact)


def discretize(a, dt):
    """ZOH factors per channel: (abar, phi) with bbar = phi * b."""
    u = a * dt
    return np.exp(u), dt * _expm1_over(u)


def ssm_kernel(a: Tensor, b: Tensor, cvec: Tensor, dt: Tensor, taps: int) -> Tensor:
    """K[j, ch] = cvec * abar**j * bbar, shape [taps, d]. Handles a == 0 exactly."""
    if taps < 1:
        raise ValueError("kernel needs at least one tap")
    ad, bd, cd, dtd = a.data, b.data, cvec.data, dt.data
    u = ad * dtd
    abar = np.exp(u)
    phi = dtd * _expm1_over(u)  # (abar - 1)/a
    j = np.arange(taps, dtype=ad.dtype)[:, None]
    powers = np.exp(j * u[None, :])  # abar**j
    base = powers * phi  # abar**j * phi
    K = cd * bd * base

    def backward(g):
        cb = cd * bd
        ga = gb = gc = gdt = None
        if a.requires_grad:
            dphi_da = dtd * dtd * _dphi_du(u)
            ga = (g * cb * (dphi_da * powers + base * j * dtd)).sum(axis=0)
        if b.requires_grad:
            gb = (g * cd * base).sum(axis=0)
        if cvec.requires_grad:
            gc = (g * bd * base).sum(axis=0)
        if dt.requires_grad:
            # d phi / d dt = abar
            gdt = (g * cb * (abar * powers + base * j * ad)).sum(axis=0)
        return ga, gb, gc, gdt

    return make_op(K, (a, b, cvec, dt), backward, "ssm_kernel")


def build_kernel(p: SSMParams) -> Tensor:
    return ssm_kernel(p.decay(), p.b, p.cvec, p.dt(), p.taps)


def ssm_forward(x: Tensor, p: SSMParams) -> Tensor:
    """x + conv(x, K) * sigmoid(x @ gate_w + gate_b), strictly causal."""
    c = x.shape[1]
    if p.taps > c:
        raise ValueError(f"SSM kernel has {p.taps} taps but the chunk only has {c} positions")
    y = ops.causal_conv1d(x, build_kernel(p), dilation=1)
    gate = ops.sigmoid(ops.add(ops.matmul(x, p.gate_w), p.gate_b))
    return ops.add(x, ops.mul(y, gate))


def ssm_scan_oracle(x, p: SSMParams) -> np.ndarray:
    """Sequential recurrence h_t = abar h_{t-1} + bbar x_t, y_t = cvec h_t (no gate, no residual)."""
    xd = np.ascontiguousarray(x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64))
    a = -np.exp(p.log_neg_a.data)
    abar, phi = discretize(a, np.exp(p.log_dt.data))
    bbar = phi * p.b.data
    return ssm_scan(xd, np.ascontiguousarray(abar), np.ascontiguousarray(bbar), np.ascontiguousarray(p.cvec.data))
