"""Benchmark the compiled basis kernels against the pure-numpy fallback.

Run:  python benchmarks/bench_kernels.py
"""

import time

import numpy as np

from salvagejm._kernels import _ref

try:
    from salvagejm._kernels import _fast
except ImportError:
    _fast = None


def clamped_knots(degree, internal, lo, hi):
    return np.concatenate([np.full(degree + 1, lo), internal, np.full(degree + 1, hi)])


def bench(fn, ts, knots, degree, deriv, repeats=7):
    best = np.inf
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn(ts, knots, degree, deriv)
        best = min(best, time.perf_counter() - t0)
    return best


def main():
    rng = np.random.default_rng(0)
    print(f"{'case':>28s} {'python':>10s} {'cython':>10s} {'speedup':>8s}")
    for degree, nint, n in [(1, 2, 10_000), (3, 6, 10_000), (3, 6, 1_000_000), (5, 12, 100_000)]:
        internal = np.sort(rng.uniform(0.5, 19.5, size=nint))
        knots = clamped_knots(degree, internal, 0.0, 20.0)
        ts = rng.uniform(0.0, 20.0, size=n)
        for deriv in (0, 1):
            label = f"deg={degree} nint={nint} n={n} d{deriv}"
            t_py = bench(_ref.design_matrix, ts, knots, degree, deriv)
            if _fast is None:
                print(f"{label:>28s} {t_py*1e3:9.2f}ms {'n/a':>10s}")
                continue
            t_cy = bench(_fast.design_matrix, ts, knots, degree, deriv)
            np.testing.assert_allclose(
                _fast.design_matrix(ts[:500], knots, degree, deriv),
                _ref.design_matrix(ts[:500], knots, degree, deriv),
                atol=1e-13,
            )
            print(f"{label:>28s} {t_py*1e3:9.2f}ms {t_cy*1e3:9.2f}ms {t_py/t_cy:7.1f}x")
    if _fast is None:
        print("compiled kernels unavailable; showing fallback timings only")


if __name__ == "__main__":
    main()
