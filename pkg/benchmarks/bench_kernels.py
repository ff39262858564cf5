"""Timing comparison of the compiled and pure-numpy kernel twins.

Run:  python benchmarks/bench_kernels.py

Both implementations are imported directly, so the SEMFIT_NO_NUMBA flag is
irrelevant here; it only selects which twin the package itself calls.
"""
import time

import numpy as np

from semfit._fastpath import IMPLEMENTATIONS


def timeit(fn, *args, repeat=5):
    fn(*args)  # warm-up (includes JIT compilation for the numba path)
    best = np.inf
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn(*args)
        best = min(best, time.perf_counter() - t0)
    return best


def main():
    rng = np.random.default_rng(0)
    n, z, p = 2000, 12, 40
    X = rng.standard_normal((n, z))
    X[rng.random((n, z)) < 0.05] = np.nan
    t = np.sort(rng.uniform(0, 50, n))
    edges = np.arange(0.0, 6.0)
    A = rng.standard_normal((z, z))
    stack = rng.standard_normal((p, z, z))

    cases = [
        ("pairwise_cov", (X, True)),
        ("lag_matrix", (t, edges)),
        ("grad_dot", (A, stack)),
        ("pair_trace", (stack,)),
    ]
    if "numba" not in IMPLEMENTATIONS:
        print("numba unavailable; only the numpy path exists")
        return
    print(f"{'kernel':<14} {'numpy':>10} {'numba':>10} {'speedup':>9}")
    for name, args in cases:
        t_np = timeit(IMPLEMENTATIONS["numpy"][name], *args)
        t_nb = timeit(IMPLEMENTATIONS["numba"][name], *args)
        print(f"{name:<14} {t_np * 1e3:>8.2f}ms {t_nb * 1e3:>8.2f}ms "
              f"{t_np / t_nb:>8.1f}x")


if __name__ == "__main__":
    main()
