#!/usr/bin/env python3
"""Timing comparison of the compiled convolution kernels vs the numpy path.

Runs forward, input-gradient, and kernel-gradient convolutions over a few
representative shapes from the attention and uncertainty networks and prints
a table of per-call times plus the ratio. Both implementations operate on
pre-padded inputs, so shapes below include the halo.

Usage: python3 benchmarks/bench_kernels.py [--repeats N] [--float32]
"""

import argparse
import time

import numpy as np

from attnmine import backend
from attnmine import kernels_np as knp

try:
    from attnmine import _convkern as knative
except ImportError:
    knative = None

# (label, batch, cin, cout, h, w, k, stride) for typical layer shapes
SHAPES = [
    ("encoder head 32x32", 8, 3, 8, 32, 32, 3, 1),
    ("encoder mid 16x16", 8, 16, 16, 16, 16, 3, 1),
    ("encoder deep 4x4", 8, 64, 64, 4, 4, 3, 1),
    ("decoder full 32x32", 8, 24, 8, 32, 32, 3, 1),
    ("pointwise mix 8x8", 8, 24, 16, 8, 8, 1, 1),
    ("strided 32->16", 8, 8, 16, 32, 32, 3, 2),
]


def _time(fn, repeats):
    fn()  # warm up any lazy setup
    t0 = time.perf_counter()
    for _ in range(repeats):
        fn()
    return (time.perf_counter() - t0) / repeats


def bench_case(label, b, cin, cout, h, w, k, stride, repeats, dtype):
    rng = np.random.default_rng(0)
    pad = k // 2
    xp = rng.standard_normal((b, cin, h + 2 * pad, w + 2 * pad)).astype(dtype)
    wt = rng.standard_normal((cout, cin, k, k)).astype(dtype)
    bias = rng.standard_normal(cout).astype(dtype)
    out_h = (h + stride - 1) // stride
    out_w = (w + stride - 1) // stride
    g = rng.standard_normal((b, cout, out_h, out_w)).astype(dtype)

    rows = []
    pairs = [
        ("forward", lambda m: m.conv2d_forward(xp, wt, bias, stride)),
        ("grad_input", lambda m: m.conv2d_backward_input(
            g, wt, stride, h + 2 * pad, w + 2 * pad)),
        ("grad_kernel", lambda m: m.conv2d_backward_kernel(g, xp, k, stride)),
    ]
    for name, call in pairs:
        t_np = _time(lambda: call(knp), repeats)
        if knative is not None:
            t_nat = _time(lambda: call(knative), repeats)
            ratio = t_np / t_nat
            rows.append((label, name, t_nat * 1e3, t_np * 1e3, ratio))
        else:
            rows.append((label, name, float("nan"), t_np * 1e3, float("nan")))
    return rows


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeats", type=int, default=30)
    ap.add_argument("--float32", action="store_true",
                    help="time the single-precision paths")
    args = ap.parse_args()
    dtype = np.float32 if args.float32 else np.float64

    print(f"compiled extension available: {knative is not None} "
          f"(active backend: {'native' if backend.NATIVE else 'numpy'})")
    print(f"dtype: {np.dtype(dtype).name}, repeats: {args.repeats}\n")
    header = f"{'case':<22} {'pass':<12} {'native ms':>10} {'numpy ms':>10} {'numpy/native':>13}"
    print(header)
    print("-" * len(header))
    for shape in SHAPES:
        for label, name, t_nat, t_np, ratio in bench_case(
                *shape, repeats=args.repeats, dtype=dtype):
            ratio_s = f"{ratio:13.2f}" if np.isfinite(ratio) else f"{'n/a':>13}"
            nat_s = f"{t_nat:10.3f}" if np.isfinite(t_nat) else f"{'n/a':>10}"
            print(f"{label:<22} {name:<12} {nat_s} {t_np:10.3f} {ratio_s}")
    print("\nratios > 1 favor the compiled kernels. The compiled path gathers")
    print("im2col buffers in C and runs a single BLAS product per call; the")
    print("numpy path pays for strided window views and per-offset loops,")
    print("which hurts most on backward passes and pointwise layers.")


if __name__ == "__main__":
    main()
