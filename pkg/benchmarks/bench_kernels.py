"""Compiled vs numpy convolution kernels at the shapes training actually uses.

    python benchmarks/bench_kernels.py [--repeat 5] [--csv out.csv]

Reports the best-of-N wall time per kernel and backend, the speedup, and
checks that both backends agree before timing anything.
"""

import argparse
import csv
import sys
import time

import numpy as np

from scai_lab.numerics import backend

# (label, N, Ci, Co, H, k): a training step batch (16 samples x 6 groups) and
# an adaptation batch (64 x 6) through a hidden 8 -> 8 layer, plus the input layer
SHAPES = [
    ("train hidden", 96, 8, 8, 32, 5),
    ("train input", 96, 3, 8, 32, 5),
    ("adapt hidden", 384, 8, 8, 32, 5),
    ("3x3 hidden", 96, 8, 8, 32, 3),
]


def _time(fn, repeat):
    best = float("inf")
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t)
    return best


def run(repeat=5):
    try:
        compiled = backend.load_backend("compiled")
    except ImportError:
        sys.exit("compiled kernels are not built; run `pip install --no-build-isolation -e .`")
    py = backend.load_backend("python")
    rng = np.random.default_rng(0)
    rows = []
    for label, n, ci, co, h, k in SHAPES:
        x = rng.standard_normal((n, ci, h, h)).astype(np.float32)
        w = rng.standard_normal((co, ci, k, k)).astype(np.float32)
        b = rng.standard_normal(co).astype(np.float32)
        gy = rng.standard_normal((n, co, h, h)).astype(np.float32)
        calls = {
            "forward": lambda K: K.conv2d_forward(x, w, b),
            "grad_input": lambda K: K.conv2d_grad_input(gy, w),
            "grad_weight": lambda K: K.conv2d_grad_weight(x, gy, k),
        }
        macs = n * ci * co * h * h * k * k
        for kernel, fn in calls.items():
            a, r = fn(compiled), fn(py)
            for u, v in zip(a if isinstance(a, tuple) else (a,), r if isinstance(r, tuple) else (r,)):
                np.testing.assert_allclose(u, v, rtol=2e-3, atol=2e-3)
            tc = _time(lambda: fn(compiled), repeat)
            tp = _time(lambda: fn(py), repeat)
            rows.append((label, kernel, tc, tp, tp / tc, macs / tc / 1e9))
    return rows


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--csv", default=None)
    args = ap.parse_args()
    rows = run(args.repeat)
    head = ("shape", "kernel", "compiled_s", "numpy_s", "speedup", "compiled_gmac_s")
    print(f"{head[0]:<14s}{head[1]:<13s}{'compiled':>10s}{'numpy':>10s}{'speedup':>9s}{'GMAC/s':>8s}")
    for label, kernel, tc, tp, sp, g in rows:
        print(f"{label:<14s}{kernel:<13s}{tc * 1e3:>8.1f}ms{tp * 1e3:>8.1f}ms{sp:>8.1f}x{g:>8.1f}")
    if args.csv:
        with open(args.csv, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(head)
            w.writerows(rows)


if __name__ == "__main__":
    main()
