#!/usr/bin/env python3
"""Benchmark the numba kernels against the pure-numpy fallback.

Runs each hot kernel on a training-shaped workload under both backends,
checks the outputs agree, and prints a timing table.

    python benchmarks/bench_backends.py [--size 16] [--channels 8] [--repeat 5]
"""

import argparse
import time

import numpy as np

from qsmkit import backend


def time_call(fn, *args, repeat=5):
    best = float("inf")
    out = None
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn(*args)
        best = min(best, time.perf_counter() - t0)
    return out, best


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--size", type=int, default=16, help="cubic spatial extent")
    ap.add_argument("--channels", type=int, default=8)
    ap.add_argument("--batch", type=int, default=2)
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()

    if not backend.HAS_NUMBA:
        raise SystemExit("numba is not importable; nothing to compare")

    rng = np.random.default_rng(0)
    n, c, s = args.batch, args.channels, args.size
    x = rng.normal(size=(n, c, s, s, s)).astype(np.float32)
    w = rng.normal(size=(c, c, 3, 3, 3)).astype(np.float32)
    b = rng.normal(size=c).astype(np.float32)
    gout = rng.normal(size=(n, c, s, s, s)).astype(np.float32)
    wt = rng.normal(size=(c, c, 2, 2, 2)).astype(np.float32)
    xp = rng.normal(size=(n, c, s // 2, s // 2, s // 2)).astype(np.float32)
    gt = rng.normal(size=(n, c, s, s, s)).astype(np.float32)

    cases = [
        ("conv3d_forward", (x, w, b, 1)),
        ("conv3d_backward_input", (gout, w, 1)),
        ("conv3d_backward_weights", (x, gout, 3, 1)),
        ("tconv3d_forward", (xp, wt, b)),
        ("tconv3d_backward_input", (gt, wt)),
        ("tconv3d_backward_weights", (xp, gt)),
        ("maxpool3d_forward", (x,)),
    ]

    # warm up JIT compilation outside the timed region
    with backend.use_backend("numba"):
        for name, call_args in cases:
            getattr(backend, name)(*call_args)

    print(f"workload: batch={n} channels={c} size={s}^3 (float32), best of {args.repeat}")
    print(f"{'kernel':<26} {'numpy [ms]':>12} {'numba [ms]':>12} {'speedup':>9} {'max|diff|':>11}")
    for name, call_args in cases:
        with backend.use_backend("numpy"):
            out_np, t_np = time_call(getattr(backend, name), *call_args, repeat=args.repeat)
        with backend.use_backend("numba"):
            out_nb, t_nb = time_call(getattr(backend, name), *call_args, repeat=args.repeat)
        a = out_np[0] if isinstance(out_np, tuple) else out_np
        bb = out_nb[0] if isinstance(out_nb, tuple) else out_nb
        diff = float(np.abs(a.astype(np.float64) - bb.astype(np.float64)).max())
        if not np.allclose(a, bb, atol=1e-4, rtol=1e-5):
            raise SystemExit(f"{name}: backends disagree (max |diff| {diff:g})")
        print(f"{name:<26} {t_np * 1e3:>12.3f} {t_nb * 1e3:>12.3f} {t_np / t_nb:>8.1f}x {diff:>11.2e}")


if __name__ == "__main__":
    main()
