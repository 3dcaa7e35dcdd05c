"""AdamW with decoupled weight decay, gradient clipping, and the LR schedule."""
import numpy as np


class ConfigError(ValueError):
    pass


def adamw_step(params, grads, moments, step, lr, beta1=0.9, beta2=0.98, eps=1e-9, weight_decay=0.0, decay_mask=None):
    """One in-place AdamW update.

    ``params``, ``grads`` and the two moment dicts in ``moments`` (keys "m" and
    "v") are keyed by parameter name and hold numpy arrays. ``decay_mask`` maps
    name -> bool; names absent from it are decayed.
    """
    if lr <= 0:
        raise ConfigError(f"learning rate must be positive, got {lr}")
    if step < 1:
        raise ConfigError(f"step counts from 1, got {step}")
    m, v = moments["m"], moments["v"]
    bc1 = 1.0 - beta1**step
    bc2 = 1.0 - beta2**step
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {p.shape} for {name}")
        if weight_decay and (decay_mask is None or decay_mask.get(name, True)):
            p *= 1.0 - lr * weight_decay
        m[name] *= beta1
        m[name] += (1.0 - beta1) * g
        v[name] *= beta2
        v[name] += (1.0 - beta2) * g * g
        p -= lr * (m[name] / bc1) / (np.sqrt(v[name] / bc2) + eps)


def init_moments(params):
    return {
        "m": {k: np.zeros_like(p) for k, p in params.items()},
        "v": {k: np.zeros_like(p) for k, p in params.items()},
    }


def clip_grad_norm(grads, max_norm):
    """Scale ``grads`` in place so the global L2 norm is at most ``max_norm``; returns the pre-clip norm."""
    total = float(np.sqrt(sum(float((g * g).sum()) for g in grads.values())))
    if max_norm and total > max_norm:
        scale = max_norm / (total + 1e-12)
        for g in grads.values():
            g *= scale
    return total


def lr_at(step, peak, warmup, max_steps):
    """Linear warmup to ``peak`` over ``warmup`` steps, then linear decay to 0 at ``max_steps``."""
    if warmup > 0 and step <= warmup:
        return peak * step / warmup
    if max_steps <= warmup:
        return peak
    return peak * max(0.0, (max_steps - step) / (max_steps - warmup))
