"""Hot inner-loop kernels with numba acceleration and a pure-numpy fallback.

Every kernel exists in two functionally identical variants. The numba
variants are compiled lazily on first use; setting the environment
variable ``DAMOE_NO_NUMBA=1`` (or importing on a machine without numba)
selects the pure-numpy path instead. ``benchmarks/bench_kernels.py``
compares the two.

Dense matrix products are deliberately *not* here: BLAS already wins.
"""

import os

import numpy as np

_DISABLED = os.environ.get("DAMOE_NO_NUMBA", "").strip() not in ("", "0")

if not _DISABLED:
    try:
        from numba import njit
    except ImportError:  # pragma: no cover - numba is a declared dependency
        _DISABLED = True

USING_NUMBA = not _DISABLED


# ---------------------------------------------------------------------------
# scatter-add over rows: out[idx[e]] += src[e]  (neighbor aggregation)
# ---------------------------------------------------------------------------

def _scatter_add_rows_np(src, idx, n_rows):
    out = np.zeros((n_rows, src.shape[1]), dtype=src.dtype)
    np.add.at(out, idx, src)
    return out


def _scatter_add_rows_loop(src, idx, out):
    for e in range(src.shape[0]):
        j = idx[e]
        for c in range(src.shape[1]):
            out[j, c] += src[e, c]


def _gather_rows_loop(x, idx, out):
    for e in range(idx.shape[0]):
        j = idx[e]
        for c in range(x.shape[1]):
            out[e, c] = x[j, c]


# ---------------------------------------------------------------------------
# BFS shortest-path distances from one source over a CSR adjacency
# ---------------------------------------------------------------------------

def _bfs_distances_np(indptr, indices, source, n):
    dist = np.full(n, -1, dtype=np.int64)
    dist[source] = 0
    frontier = np.zeros(n, dtype=bool)
    frontier[source] = True
    d = 0
    while frontier.any():
        nxt = np.zeros(n, dtype=bool)
        for v in np.flatnonzero(frontier):
            nbrs = indices[indptr[v]:indptr[v + 1]]
            nxt[nbrs] = True
        nxt &= dist < 0
        dist[np.flatnonzero(nxt)] = d + 1
        frontier = nxt
        d += 1
    return dist


def _bfs_distances_loop(indptr, indices, source, n):
    dist = np.full(n, -1, dtype=np.int64)
    queue = np.empty(n, dtype=np.int64)
    head = 0
    tail = 0
    queue[tail] = source
    tail += 1
    dist[source] = 0
    while head < tail:
        v = queue[head]
        head += 1
        for p in range(indptr[v], indptr[v + 1]):
            u = indices[p]
            if dist[u] < 0:
                dist[u] = dist[v] + 1
                queue[tail] = u
                tail += 1
    return dist


if USING_NUMBA:
    _scatter_add_rows_nb = njit(cache=True)(_scatter_add_rows_loop)
    _gather_rows_nb = njit(cache=True)(_gather_rows_loop)
    _bfs_distances_nb = njit(cache=True)(_bfs_distances_loop)

    def scatter_add_rows(src, idx, n_rows):
        out = np.zeros((n_rows, src.shape[1]), dtype=src.dtype)
        _scatter_add_rows_nb(src, idx, out)
        return out

    def gather_rows(x, idx):
        out = np.empty((idx.shape[0], x.shape[1]), dtype=x.dtype)
        _gather_rows_nb(x, idx, out)
        return out

    def bfs_distances(indptr, indices, source, n):
        return _bfs_distances_nb(indptr, indices, source, n)

else:

    def scatter_add_rows(src, idx, n_rows):
        return _scatter_add_rows_np(src, idx, n_rows)

    def gather_rows(x, idx):
        return x[idx]

    def bfs_distances(indptr, indices, source, n):
        return _bfs_distances_np(indptr, indices, source, n)


def warm_up():
    """Trigger JIT compilation so timing runs do not measure the compiler."""
    src = np.ones((3, 2))
    idx = np.array([0, 1, 0], dtype=np.int64)
    scatter_add_rows(src, idx, 2)
    gather_rows(src, idx)
    indptr = np.array([0, 1, 2], dtype=np.int64)
    indices = np.array([1, 0], dtype=np.int64)
    bfs_distances(indptr, indices, 0, 2)
