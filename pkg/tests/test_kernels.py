"""The numba kernels and their pure-numpy fallbacks must agree exactly."""

import numpy as np
import pytest

from damoe import kernels


@pytest.fixture(scope="module", autouse=True)
def warm():
    kernels.warm_up()


def test_scatter_add_paths_agree(rng):
    for _ in range(20):
        e = int(rng.integers(0, 50))
        d = int(rng.integers(1, 8))
        n = int(rng.integers(1, 20))
        src = rng.standard_normal((e, d))
        idx = rng.integers(0, n, e)
        fast = kernels.scatter_add_rows(src, idx, n)
        ref = kernels._scatter_add_rows_np(src, idx, n)
        np.testing.assert_array_equal(fast, ref)


def test_gather_paths_agree(rng):
    x = rng.standard_normal((10, 4))
    idx = rng.integers(0, 10, 25)
    np.testing.assert_array_equal(kernels.gather_rows(x, idx), x[idx])


def test_bfs_paths_agree(rng):
    import networkx as nx

    for trial in range(15):
        n = int(rng.integers(2, 30))
        nxg = nx.gnp_random_graph(n, 0.15, seed=int(rng.integers(0, 10**6)))
        pairs = np.array(sorted(nxg.edges), dtype=np.int64).reshape(-1, 2)
        both = np.vstack([pairs, pairs[:, ::-1]]) if pairs.size else pairs
        both = both[np.lexsort((both[:, 1], both[:, 0]))] if both.size else both
        indptr = np.zeros(n + 1, dtype=np.int64)
        if both.size:
            np.add.at(indptr, both[:, 0] + 1, 1)
        indptr = np.cumsum(indptr)
        indices = both[:, 1].copy() if both.size else np.zeros(0, dtype=np.int64)

        src = int(rng.integers(0, n))
        fast = kernels.bfs_distances(indptr, indices, src, n)
        slow = kernels._bfs_distances_np(indptr, indices, src, n)
        np.testing.assert_array_equal(fast, slow)
        lengths = nx.single_source_shortest_path_length(nxg, src)
        expected = np.array([lengths.get(v, -1) for v in range(n)])
        np.testing.assert_array_equal(fast, expected)


def test_flag_reported():
    assert isinstance(kernels.USING_NUMBA, bool)
