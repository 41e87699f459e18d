"""Compiled kernels against the NumPy fallback.

Run ``python3 benchmarks/bench_kernels.py [--repeat N] [--quick]``. Each
kernel is timed on both backends with identical inputs; outputs are checked
for equality before the speedup is reported.
"""
from __future__ import annotations

import argparse
import time

import numpy as np

from penaltydid._backend import get_kernels
from penaltydid.forest import ForestConfig, fit_forest


def best_of(fn, repeat: int) -> float:
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def smoothing_case(n_units: int, horizon: int, rng):
    n_rows = 3 * n_units
    unit = np.sort(rng.integers(0, n_units, n_rows)).astype(np.int64)
    start = rng.integers(-3, horizon, n_rows).astype(np.int64)
    length = rng.integers(1, 4, n_rows).astype(np.int64)

    def run(k):
        return np.asarray(k.smooth_batch(unit, start, length, n_units, horizon))
    return run


def tree_case(n: int, p: int, rng):
    xb = np.ascontiguousarray(rng.integers(0, 64, size=(n, p)).astype(np.uint8))
    n_bins = np.full(p, 64, dtype=np.int32)
    y = rng.normal(size=n) + (xb[:, 0] > 30)
    counts = np.bincount(rng.integers(0, n, n), minlength=n).astype(np.int32)

    def run(k):
        return [np.asarray(a) for a in k.build_tree(xb, n_bins, y, counts, 6, 20)]
    return run


def forest_case(n: int, p: int, n_trees: int, rng):
    X = rng.normal(size=(n, p))
    y = np.sin(X[:, 0]) + 0.3 * rng.normal(size=n)
    cfg = ForestConfig(n_trees=n_trees, max_depth=5, min_leaf=20, seed=1)

    def run(k):
        name = "cython" if k is not get_kernels("python") else "python"
        forest = fit_forest(X, y, cfg, backend=name)
        return forest.predict(X, backend=name)
    return run


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=3)
    parser.add_argument("--quick", action="store_true", help="smaller inputs")
    args = parser.parse_args(argv)
    try:
        cy = get_kernels("cython")
    except ImportError:
        print("compiled kernels are not built; nothing to compare")
        return 1
    py = get_kernels("python")
    rng = np.random.default_rng(0)
    scale = 0.2 if args.quick else 1.0
    cases = {
        "smooth_batch (5k units x 132 months)": smoothing_case(int(5000 * scale), 132, rng),
        "build_tree (20k rows x 6 features, depth 6)": tree_case(int(20_000 * scale), 6, rng),
        "forest fit+predict (10k rows, 20 trees)": forest_case(int(10_000 * scale), 6, 20, rng),
    }
    print(f"{'kernel':48s} {'python s':>10s} {'cython s':>10s} {'speedup':>8s}")
    for name, run in cases.items():
        a, b = run(py), run(cy)
        same = all(np.array_equal(u, v) for u, v in zip(a, b)) if isinstance(a, list) else np.array_equal(a, b)
        if not same:
            print(f"{name}: outputs differ between backends")
            return 1
        t_py = best_of(lambda: run(py), args.repeat)
        t_cy = best_of(lambda: run(cy), args.repeat)
        print(f"{name:48s} {t_py:10.4f} {t_cy:10.4f} {t_py / t_cy:7.1f}x")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
