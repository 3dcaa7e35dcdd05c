"""Hot loops: depthwise dilated causal convolution and the diagonal SSM scan.

Each kernel has a numba version and a numpy version with the same signature.
The module-level names dispatch on ``chunklm._accel.USE_NUMBA``.
"""
import numpy as np

from .._accel import USE_NUMBA, njit

# --------------------------------------------------------------------------
# numpy path
# --------------------------------------------------------------------------


def conv_fwd_numpy(x, k, dilation):
    """out[b, t, ch] = sum_j k[j, ch] * x[b, t - j*dilation, ch]"""
    _, T, _ = x.shape
    out = np.zeros_like(x)
    for j in range(k.shape[0]):
        s = j * dilation
        if s >= T:
            break
        out[:, s:, :] += k[j] * x[:, : T - s, :]
    return out


def conv_bwd_input_numpy(g, k, dilation):
    _, T, _ = g.shape
    dx = np.zeros_like(g)
    for j in range(k.shape[0]):
        s = j * dilation
        if s >= T:
            break
        dx[:, : T - s, :] += k[j] * g[:, s:, :]
    return dx


def conv_bwd_kernel_numpy(g, x, taps, dilation):
    _, T, D = x.shape
    dk = np.zeros((taps, D), dtype=x.dtype)
    for j in range(taps):
        s = j * dilation
        if s >= T:
            break
        dk[j] = np.einsum("btd,btd->d", g[:, s:, :], x[:, : T - s, :])
    return dk


def ssm_scan_numpy(x, abar, bbar, cvec):
    B, T, D = x.shape
    h = np.zeros((B, D), dtype=x.dtype)
    y = np.empty_like(x)
    for t in range(T):
        h = abar * h + bbar * x[:, t, :]
        y[:, t, :] = cvec * h
    return y


# --------------------------------------------------------------------------
# numba path
# --------------------------------------------------------------------------


@njit
def conv_fwd_numba(x, k, dilation):
    B, T, D = x.shape
    L = k.shape[0]
    out = np.zeros_like(x)
    for b in range(B):
        for t in range(T):
            for j in range(L):
                s = t - j * dilation
                if s < 0:
                    break
                for ch in range(D):
                    out[b, t, ch] += k[j, ch] * x[b, s, ch]
    return out


@njit
def conv_bwd_input_numba(g, k, dilation):
    B, T, D = g.shape
    L = k.shape[0]
    dx = np.zeros_like(g)
    for b in range(B):
        for s in range(T):
            for j in range(L):
                t = s + j * dilation
                if t >= T:
                    break
                for ch in range(D):
                    dx[b, s, ch] += k[j, ch] * g[b, t, ch]
    return dx


@njit
def conv_bwd_kernel_numba(g, x, taps, dilation):
    B, T, D = x.shape
    dk = np.zeros((taps, D), dtype=x.dtype)
    for j in range(taps):
        off = j * dilation
        for b in range(B):
            for t in range(off, T):
                for ch in range(D):
                    dk[j, ch] += g[b, t, ch] * x[b, t - off, ch]
    return dk


@njit
def ssm_scan_numba(x, abar, bbar, cvec):
    B, T, D = x.shape
    y = np.empty_like(x)
    for b in range(B):
        for ch in range(D):
            h = 0.0
            for t in range(T):
                h = abar[ch] * h + bbar[ch] * x[b, t, ch]
                y[b, t, ch] = cvec[ch] * h
    return y


if USE_NUMBA:
    conv_fwd = conv_fwd_numba
    conv_bwd_input = conv_bwd_input_numba
    conv_bwd_kernel = conv_bwd_kernel_numba
    ssm_scan = ssm_scan_numba
else:
    conv_fwd = conv_fwd_numpy
    conv_bwd_input = conv_bwd_input_numpy
    conv_bwd_kernel = conv_bwd_kernel_numpy
    ssm_scan = ssm_scan_numpy

BACKEND = "numba" if USE_NUMBA else "numpy"
