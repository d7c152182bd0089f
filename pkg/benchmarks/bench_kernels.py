"""Benchmark the numba kernels against their pure-numpy fallbacks.

Run twice to compare the two paths:

    python benchmarks/bench_kernels.py
    DAMOE_NO_NUMBA=1 python benchmarks/bench_kernels.py
"""

import time

import numpy as np

from damoe import kernels


def time_call(fn, repeats=200):
    fn()  # warm up (JIT compile on the numba path)
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def bench_scatter(rng):
    print("scatter_add_rows (edges x dim -> nodes x dim)")
    for e, d, n in [(200, 8, 40), (2000, 16, 300), (20000, 64, 500)]:
        src = rng.standard_normal((e, d))
        idx = rng.integers(0, n, e)
        t = time_call(lambda: kernels.scatter_add_rows(src, idx, n))
        print(f"  e={e:6d} d={d:3d} n={n:4d}: {t * 1e6:9.2f} us")


def bench_gather(rng):
    print("gather_rows")
    for m, d, n in [(200, 8, 40), (2000, 16, 300), (20000, 64, 500)]:
        x = rng.standard_normal((n, d))
        idx = rng.integers(0, n, m)
        t = time_call(lambda: kernels.gather_rows(x, idx))
        print(f"  m={m:6d} d={d:3d} n={n:4d}: {t * 1e6:9.2f} us")


def bench_bfs(rng):
    print("bfs_distances (ring-of-cliques graphs)")
    for n in (50, 500, 2000):
        pairs = [(i, (i + 1) % n) for i in range(n)]
        pairs += [(int(rng.integers(0, n)), int(rng.integers(0, n))) for _ in range(n)]
        pairs = [(u, v) for u, v in pairs if u != v]
        both = np.array(pairs + [(v, u) for u, v in pairs], dtype=np.int64)
        both = np.unique(both, axis=0)
        indptr = np.zeros(n + 1, dtype=np.int64)
        np.add.at(indptr, both[:, 0] + 1, 1)
        indptr = np.cumsum(indptr)
        indices = both[np.lexsort((both[:, 1], both[:, 0]))][:, 1].copy()
        t = time_call(lambda: kernels.bfs_distances(indptr, indices, 0, n), repeats=50)
        print(f"  n={n:5d}: {t * 1e6:9.2f} us")


def main():
    path = "numba" if kernels.USING_NUMBA else "pure numpy (fallback)"
    print(f"kernel path: {path}")
    rng = np.random.default_rng(0)
    bench_scatter(rng)
    bench_gather(rng)
    bench_bfs(rng)


if __name__ == "__main__":
    main()
