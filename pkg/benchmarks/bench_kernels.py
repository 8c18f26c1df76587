"""Benchmark the numba kernels against their pure-numpy twins.

Run:
    python benchmarks/bench_kernels.py

The same dispatch is controlled at import time by KLP_NUMBA=0|1; this
script times both implementations directly regardless of the env flag.
"""

from __future__ import annotations

import time

import numpy as np

from klp import kernels


def time_fn(fn, *args, iterations: int = 20) -> float:
    fn(*args)  # warmup (includes JIT compilation for the numba path)
    start = time.perf_counter()
    for _ in range(iterations):
        fn(*args)
    return (time.perf_counter() - start) / iterations


def print_row(name: str, numpy_s: float, numba_s: float) -> None:
    print(f"{name:<34} numpy {numpy_s * 1000:9.3f} ms   numba {numba_s * 1000:9.3f} ms   "
          f"speedup {numpy_s / numba_s:6.1f}x")


def bench_greedy_keep() -> None:
    rng = np.random.default_rng(0)
    for n, d in ((500, 64), (2000, 128), (5000, 256)):
        emb = rng.standard_normal((n, d))
        emb /= np.linalg.norm(emb, axis=1, keepdims=True)
        numpy_s = time_fn(kernels._greedy_keep_numpy, emb, 0.85, iterations=3)
        numba_s = time_fn(kernels._greedy_keep_numba, emb, 0.85, iterations=3)
        keep_np, _ = kernels._greedy_keep_numpy(emb, 0.85)
        keep_nb, _ = kernels._greedy_keep_numba(emb, 0.85)
        assert np.array_equal(keep_np, keep_nb)
        print_row(f"greedy_keep n={n} d={d}", numpy_s, numba_s)


def bench_intersect() -> None:
    rng = np.random.default_rng(1)
    for size in (10_000, 100_000, 1_000_000):
        a = np.unique(rng.integers(0, size * 4, size=size))
        b = np.unique(rng.integers(0, size * 4, size=size))
        numpy_s = time_fn(kernels._intersect2_numpy, a, b)
        numba_s = time_fn(kernels._intersect2_numba, a, b)
        assert np.array_equal(
            kernels._intersect2_numpy(a, b), kernels._intersect2_numba(a, b)
        )
        print_row(f"intersect2 |a|=|b|={size}", numpy_s, numba_s)


def bench_relevance() -> None:
    rng = np.random.default_rng(2)
    for n_products, per_row in ((10_000, 12), (50_000, 16)):
        indptr = [0]
        ids: list[int] = []
        scores: list[float] = []
        for _ in range(n_products):
            row = np.unique(rng.integers(0, 1000, size=per_row))
            ids.extend(int(x) for x in row)
            scores.extend(float(s) for s in rng.uniform(0.5, 2.0, size=row.size))
            indptr.append(len(ids))
        indptr_arr = np.asarray(indptr, dtype=np.int64)
        ids_arr = np.asarray(ids, dtype=np.int64)
        scores_arr = np.asarray(scores, dtype=np.float64)
        cand = np.arange(n_products, dtype=np.int64)
        query = np.unique(rng.integers(0, 1000, size=4)).astype(np.int64)
        numpy_s = time_fn(
            kernels._relevance_numpy, cand, indptr_arr, ids_arr, scores_arr, query,
            iterations=3,
        )
        numba_s = time_fn(
            kernels._relevance_numba, cand, indptr_arr, ids_arr, scores_arr, query,
            iterations=3,
        )
        rel_np, _ = kernels._relevance_numpy(cand, indptr_arr, ids_arr, scores_arr, query)
        rel_nb, _ = kernels._relevance_numba(cand, indptr_arr, ids_arr, scores_arr, query)
        assert rel_np.tobytes() == rel_nb.tobytes()
        print_row(f"relevance P={n_products} |q|={query.size}", numpy_s, numba_s)


def main() -> None:
    print(f"numba available: {kernels.HAVE_NUMBA}   active backend: {kernels.backend_name()}")
    print("-" * 98)
    bench_greedy_keep()
    bench_intersect()
    bench_relevance()
    print("-" * 98)
    print("both paths verified to produce identical results on every benchmarked input")


if __name__ == "__main__":
    main()
