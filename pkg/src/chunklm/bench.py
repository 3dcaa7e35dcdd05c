"""Runtime and activation-memory scaling: chunked model vs. the attention baseline."""
from __future__ import annotations

import csv
import dataclasses
import gc
import time
from dataclasses import dataclass

import numpy as np

from .attention import MAX_ATTENTION_LEN, QuadraticGuardError, attn_forward, init_attention
from .config import ModelConfig
from .model import forward_sequence, init_params
from .numerics.tensor import live_floats, no_grad, peak_floats, reset_peak

CSV_HEADER = ["tag", "n", "c", "reps", "sec_per_token", "peak_floats"]


@dataclass
class BenchRecord:
    tag: str
    n: int
    c: int | None
    reps: int
    sec_per_token: float | None
    peak_floats: int | None
    refused: bool = False

    @property
    def seconds(self):
        return None if self.sec_per_token is None else self.sec_per_token * self.n

    def row(self):
        return [
            self.tag,
            self.n,
            "" if self.c is None else self.c,
            self.reps,
            "refused" if self.refused else f"{self.sec_per_token:.6e}",
            "" if self.peak_floats is None else self.peak_floats,
        ]


def _timed(fn):
    """(wall seconds, peak floats above the pre-call baseline) with the cyclic collector paused."""
    gc.collect()
    enabled = gc.isenabled()
    gc.disable()
    try:
        base = live_floats()
        reset_peak()
        t0 = time.perf_counter()
        fn()
        elapsed = time.perf_counter() - t0
        return elapsed, peak_floats() - base
    finally:
        if enabled:
            gc.enable()


def _measure_all(runners: dict, reps):
    """Best time and peak per key. Reps go round-robin over the keys so slow
    drift in machine speed lands on every length alike instead of biasing the fit."""
    best = {k: float("inf") for k in runners}
    peak = {k: 0 for k in runners}
    for _ in range(reps):
        for k, fn in runners.items():
            t, p = _timed(fn)
            best[k] = min(best[k], t)
            peak[k] = max(peak[k], p)
    return best, peak


def _chunked_runner(n, cfg, params, seed):
    toks = np.random.default_rng(seed).integers(0, 256, size=n)

    def run():
        with no_grad():
            loss, _ = forward_sequence([toks], params, cfg)
            del loss

    return run


def _attention_runner(n, params, seed):
    toks = np.random.default_rng(seed).integers(0, 256, size=n)

    def run():
        with no_grad():
            out = attn_forward(toks, params)
            del out

    return run


def _warm_chunked(cfg, params):
    with no_grad():
        forward_sequence([np.zeros(2 * cfg.chunk_size, dtype=np.int64)], params, cfg)  # jit / caches


def bench_chunked(n, cfg: ModelConfig, reps=3, seed=0, params=None) -> BenchRecord:
    params = params if params is not None else init_params(cfg, seed=seed)
    _warm_chunked(cfg, params)
    best, peak = _measure_all({n: _chunked_runner(n, cfg, params, seed)}, reps)
    return BenchRecord("chunked", n, cfg.chunk_size, reps, best[n] / n, peak[n])


def bench_attention(n, d=128, reps=3, seed=0, params=None) -> BenchRecord:
    params = params if params is not None else init_attention(d=d, seed=seed)
    try:
        best, peak = _measure_all({n: _attention_runner(n, params, seed)}, reps)
    except QuadraticGuardError:
        return BenchRecord("attention", n, None, reps, None, None, refused=True)
    return BenchRecord("attention", n, None, reps, best[n] / n, peak[n])


def fit_exponent(ns, seconds):
    """Least-squares fit of log(time) = alpha*log(n) + b; returns (alpha, R^2)."""
    x, y = np.log(np.asarray(ns, dtype=float)), np.log(np.asarray(seconds, dtype=float))
    if x.size < 2:
        raise ValueError("need at least two points to fit")
    alpha, b = np.polyfit(x, y, 1)
    resid = y - (alpha * x + b)
    ss_tot = float(((y - y.mean()) ** 2).sum())
    r2 = 1.0 - float((resid**2).sum()) / ss_tot if ss_tot > 0 else 1.0
    return float(alpha), r2


def validate_n_list(ns):
    ns = list(ns)
    if ns != sorted(ns) or len(set(ns)) != len(ns):
        raise ValueError("lengths must be strictly ascending")
    if len(ns) < 4 or ns[-1] < 8 * ns[0]:
        raise ValueError("need at least 4 lengths spanning an 8x range")
    return ns


def run_scaling(n_list, attn_n_list, cfg: ModelConfig, reps=3, seed=0, d_attn=None, out=None, log=print):
    """Benchmark both models; returns (records, fits) with fits[tag] = (alpha, r2)."""
    records = []
    chunk_params = init_params(cfg, seed=seed)
    _warm_chunked(cfg, chunk_params)
    best, peak = _measure_all({n: _chunked_runner(n, cfg, chunk_params, seed) for n in n_list}, reps)
    for n in n_list:
        rec = BenchRecord("chunked", n, cfg.chunk_size, reps, best[n] / n, peak[n])
        records.append(rec)
        log(f"chunked   n={n:>7d}  {rec.sec_per_token * 1e6:9.3f} us/token  peak_floats={rec.peak_floats}")

    attn_params = init_attention(d=d_attn or cfg.d_model, seed=seed)
    allowed = [n for n in attn_n_list if n <= MAX_ATTENTION_LEN]
    best, peak = _measure_all({n: _attention_runner(n, attn_params, seed) for n in allowed}, reps)
    for n in attn_n_list:
        if n not in best:
            records.append(BenchRecord("attention", n, None, reps, None, None, refused=True))
            log(f"attention n={n:>7d}  refused by quadratic guard")
            continue
        rec = BenchRecord("attention", n, None, reps, best[n] / n, peak[n])
        records.append(rec)
        log(f"attention n={n:>7d}  {rec.sec_per_token * 1e6:9.3f} us/token  peak_floats={rec.peak_floats}")
    fits = {}
    for tag in ("chunked", "attention"):
        pts = [(r.n, r.seconds) for r in records if r.tag == tag and not r.refused]
        if len(pts) >= 2:
            fits[tag] = fit_exponent(*zip(*pts))
    if out is not None:
        write_csv(records, out)
    return records, fits


def write_csv(records, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_HEADER)
        for r in records:
            w.writerow(r.row())


def chunked_peak_constant(records) -> bool:
    peaks = {r.peak_floats for r in records if r.tag == "chunked" and not r.refused}
    return len(peaks) <= 1


def desk_bench_config(**overrides) -> ModelConfig:
    return dataclasses.replace(ModelConfig(), **overrides)
