"""Time the numba kernels against their numpy twins on the shapes the model uses.

    python benchmarks/bench_kernels.py --batch 8 --chunk 128 --d 128 --reps 20
"""
import argparse
import time

import numpy as np

from chunklm._accel import HAVE_NUMBA
from chunklm.numerics import kernels as K


def best_of(fn, reps):
    fn()  # compile / warm
    best = float("inf")
    for _ in range(reps):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def cases(B, c, d, taps, dilation, seed=0):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((B, c, d))
    g = rng.standard_normal((B, c, d))
    k = rng.standard_normal((taps, d))
    abar = rng.uniform(0.5, 0.99, d)
    bbar = rng.standard_normal(d)
    cvec = rng.standard_normal(d)
    return {
        "conv_fwd": (K.conv_fwd_numpy, K.conv_fwd_numba, (x, k, dilation)),
        "conv_bwd_input": (K.conv_bwd_input_numpy, K.conv_bwd_input_numba, (g, k, dilation)),
        "conv_bwd_kernel": (K.conv_bwd_kernel_numpy, K.conv_bwd_kernel_numba, (g, x, taps, dilation)),
        "ssm_scan": (K.ssm_scan_numpy, K.ssm_scan_numba, (x, abar, bbar, cvec)),
    }


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--batch", type=int, default=8)
    ap.add_argument("--chunk", type=int, default=128)
    ap.add_argument("--d", type=int, default=128)
    ap.add_argument("--taps", type=int, default=16)
    ap.add_argument("--dilation", type=int, default=2)
    ap.add_argument("--reps", type=int, default=20)
    args = ap.parse_args()
    if not HAVE_NUMBA:
        print("numba not installed; only the numpy path exists")
    print(f"B={args.batch} c={args.chunk} d={args.d} taps={args.taps} dilation={args.dilation}")
    print(f"{'kernel':16s} {'numpy ms':>10s} {'numba ms':>10s} {'speedup':>8s} {'max|diff|':>10s}")
    for name, (f_np, f_nb, inp) in cases(args.batch, args.chunk, args.d, args.taps, args.dilation).items():
        t_np = best_of(lambda: f_np(*inp), args.reps)
        t_nb = best_of(lambda: f_nb(*inp), args.reps)
        diff = float(np.max(np.abs(f_np(*inp) - f_nb(*inp))))
        print(f"{name:16s} {t_np * 1e3:10.3f} {t_nb * 1e3:10.3f} {t_np / t_nb:8.2f} {diff:10.2e}")


if __name__ == "__main__":
    main()
