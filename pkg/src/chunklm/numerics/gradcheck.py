import numpy as np

from .tensor import Tensor


def grad_check(f, params, probes=20, h=1e-5, seed=0):
    """Compare reverse-mode gradients of scalar ``f()`` with central differences.

    ``params`` is a list (or dict) of leaf Tensors read by ``f``. ``probes``
    coordinates are drawn at random across all parameters. Returns the max of
    |analytic - numeric| / max(1, |analytic|, |numeric|).
    """
    if isinstance(params, dict):
        params = list(params.values())
    for p in params:
        p.grad = None
        p.requires_grad = True
    out = f()
    out.backward()
    analytic = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in params]

    rng = np.random.default_rng(seed)
    sizes = np.array([p.data.size for p in params])
    total = int(sizes.sum())
    if total == 0:
        return 0.0
    picks = rng.choice(total, size=min(probes, total), replace=False)
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    worst = 0.0
    for flat in picks:
        i = int(np.searchsorted(offsets, flat, side="right") - 1)
        j = int(flat - offsets[i])
        arr = params[i].data.reshape(-1)
        orig = arr[j]
        arr[j] = orig + h
        fp = _value(f())
        arr[j] = orig - h
        fm = _value(f())
        arr[j] = orig
        num = (fp - fm) / (2.0 * h)
        ana = float(analytic[i].reshape(-1)[j])
        err = abs(ana - num) / max(1.0, abs(ana), abs(num))
        worst = max(worst, err)
    return worst


def _value(t):
    return float(t.data) if isinstance(t, Tensor) else float(t)
