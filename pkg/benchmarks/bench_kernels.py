"""Time the compiled vol2col/col2vol kernels against the NumPy fallback.

Usage: python3 benchmarks/bench_kernels.py [--repeat N]

Shapes are the three backbone layers at desk scale (batch 8, 16x32x32 clips).
"""
from __future__ import annotations

import argparse
import timeit

import numpy as np

from egomtl import kernels

LAYERS = [
    # name, input [B, C, T, H, W], kernel, stride, padding
    ("stage0", (8, 3, 16, 32, 32), (3, 3, 3), (1, 2, 2), (1, 1, 1)),
    ("stage1", (8, 16, 16, 16, 16), (3, 3, 3), (2, 2, 2), (1, 1, 1)),
    ("stage2", (8, 32, 8, 8, 8), (3, 3, 3), (1, 1, 1), (1, 1, 1)),
]


def bench(fn, repeat: int) -> float:
    fn()  # warm-up
    return min(timeit.repeat(fn, number=1, repeat=repeat))


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    compiled = kernels.BACKEND == "cython"
    if not compiled:
        print("compiled extension not available; timing the NumPy fallback only")
    rng = np.random.default_rng(0)
    print(f"{'layer':8s} {'op':8s} {'numpy ms':>10s} {'cython ms':>10s} {'speedup':>8s}")
    for name, shape, k, s, p in LAYERS:
        x = rng.standard_normal(shape).astype(np.float32)
        args6 = (*k, *s, *p)
        cols = kernels.py_vol2col(x, *args6)
        C, T, H, W = shape[1:]
        cases = [
            ("vol2col", lambda: kernels.py_vol2col(x, *args6), lambda: kernels.vol2col(x, *args6)),
            ("col2vol", lambda: kernels.py_col2vol(cols, C, T, H, W, *args6),
             lambda: kernels.col2vol(cols, C, T, H, W, *args6)),
        ]
        for op, py_fn, fast_fn in cases:
            t_py = bench(py_fn, args.repeat) * 1e3
            if compiled:
                t_c = bench(fast_fn, args.repeat) * 1e3
                print(f"{name:8s} {op:8s} {t_py:10.2f} {t_c:10.2f} {t_py / t_c:7.2f}x")
            else:
                print(f"{name:8s} {op:8s} {t_py:10.2f} {'-':>10s} {'-':>8s}")


if __name__ == "__main__":
    main()
