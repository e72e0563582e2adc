"""Compare the compiled and numpy subset least-squares kernels.

Usage: python benchmarks/bench_kernels.py [--repeats R]

Times ``batch_residuals`` over every t-subset of K screened columns for a
few problem sizes with each kernel, checks that both give the same norms,
and finishes with an end-to-end ``so_search`` on an expanded feature space.
"""

from __future__ import annotations

import argparse
import math
import time

import numpy as np

from sisso import kernels
from sisso.expand import build_space
from sisso.solve import batch_residuals, so_search

CASES = [(10, 40, 1), (10, 40, 2), (10, 60, 3), (100, 40, 2), (100, 60, 3)]


def best_time(fn, repeats: int) -> float:
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeats", type=int, default=3)
    args = parser.parse_args()

    compiled = kernels.compiled_subset_residual_norms()
    python = kernels.python_subset_residual_norms
    if compiled is None:
        print("compiled extension not built; run `pip install -e . --no-build-isolation` first")
        return

    rng = np.random.default_rng(0)
    print(f"{'N':>5} {'K':>4} {'t':>2} {'subsets':>9} {'python s':>10} {'cython s':>10} {'speedup':>8} {'max diff':>9}")
    for n, K, t in CASES:
        phi = rng.normal(size=(n, K))
        y = rng.normal(size=n)
        _, a, _ = batch_residuals(y, phi, t, kernel=python)
        _, b, _ = batch_residuals(y, phi, t, kernel=compiled)
        tp = best_time(lambda: batch_residuals(y, phi, t, kernel=python), args.repeats)
        tc = best_time(lambda: batch_residuals(y, phi, t, kernel=compiled), args.repeats)
        print(f"{n:>5} {K:>4} {t:>2} {math.comb(K, t):>9} {tp:>10.4f} {tc:>10.4f} {tp / tc:>7.1f}x "
              f"{np.max(np.abs(a - b)):>9.1e}")

    X = rng.uniform(1, 5, size=(10, 4))
    y = 10 * X[:, 0] / (X[:, 1] * (X[:, 2] + X[:, 3])) + rng.normal(0, 0.05, 10)
    space = build_space(X, ["+", "-", "*", "/"], 2)
    tp = best_time(lambda: so_search(y, space, k=20, T=3, kernel=python), args.repeats)
    tc = best_time(lambda: so_search(y, space, k=20, T=3, kernel=compiled), args.repeats)
    print(f"\nso_search on {space.D} features, k=20, T=3: python {tp:.3f} s, cython {tc:.3f} s "
          f"({tp / tc:.1f}x)")


if __name__ == "__main__":
    main()
