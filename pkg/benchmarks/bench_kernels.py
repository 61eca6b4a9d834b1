#!/usr/bin/env python3
"""Benchmark the numba kernels against the pure-numpy fallback.

Runs each hot kernel on a desk-scale MLP workload with both backends and
prints per-call times and the speedup. The active backend for the package
itself is chosen by CANARYAUDIT_BACKEND (auto|numba|numpy); this script
times both implementations directly, regardless of the flag.

Usage: python benchmarks/bench_kernels.py [--batch 512] [--repeats 20]
"""

import argparse
import time

import numpy as np

from canaryaudit import kernels as K
from canaryaudit.models import MlpArch, _mlp_offsets, mlp_widths


def time_call(fn, *args, repeats):
    fn(*args)  # warm-up (and numba compile)
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn(*args)
        best = min(best, time.perf_counter() - t0)
    return best


def main():
    parser = argparse.ArgumentParser()
    parser.add_argument("--batch", type=int, default=512)
    parser.add_argument("--dim", type=int, default=20)
    parser.add_argument("--hidden", type=int, default=16)
    parser.add_argument("--classes", type=int, default=3)
    parser.add_argument("--repeats", type=int, default=20)
    args = parser.parse_args()

    arch = MlpArch(args.dim, (args.hidden,), num_classes=args.classes)
    widths = mlp_widths(arch)
    woff, boff, aoff, total = _mlp_offsets(widths)
    rng = np.random.default_rng(0)
    theta = rng.standard_normal(total)
    v = rng.standard_normal(total)
    X = rng.standard_normal((args.batch, args.dim))
    Y = rng.integers(0, args.classes, args.batch).astype(np.float64)
    U = rng.standard_normal((args.batch, args.hidden))
    G = rng.standard_normal((args.batch, total))

    cases = [
        ("losses", (theta, widths, woff, boff, aoff, X, Y, 0.001, 1)),
        ("loss_grad", (theta, widths, woff, boff, aoff, X, Y, 0.001, 1)),
        ("per_example_grads", (theta, widths, woff, boff, aoff, X, Y, 0.001, 1)),
        ("grad_x", (theta, widths, woff, boff, aoff, X, Y, 1)),
        ("hvp", (theta, v, widths, woff, boff, aoff, X, Y, 0.001, 1)),
        ("mixed_hvp", (theta, v, widths, woff, boff, aoff, X, Y, 1)),
        ("embed", (theta, widths, woff, boff, aoff, X)),
        ("embed_vjp", (theta, widths, woff, boff, aoff, X, U)),
    ]

    print(f"batch={args.batch} dim={args.dim} hidden={args.hidden} "
          f"classes={args.classes} params={total}")
    print(f"{'kernel':<20}{'numpy [ms]':>12}{'numba [ms]':>12}{'speedup':>10}")
    for name, call_args in cases:
        t_np = time_call(K._NUMPY_KERNELS[f"mlp_{name}"], *call_args, repeats=args.repeats)
        t_nb = time_call(K._NUMBA_KERNELS[f"mlp_{name}"], *call_args, repeats=args.repeats)
        print(f"{name:<20}{t_np * 1e3:>12.3f}{t_nb * 1e3:>12.3f}{t_np / t_nb:>10.2f}x")
    t_np = time_call(K.clip_rows_mean_np, G, 1.0, repeats=args.repeats)
    t_nb = time_call(K.clip_rows_mean_nb, G, 1.0, repeats=args.repeats)
    print(f"{'clip_rows_mean':<20}{t_np * 1e3:>12.3f}{t_nb * 1e3:>12.3f}{t_np / t_nb:>10.2f}x")


if __name__ == "__main__":
    main()
