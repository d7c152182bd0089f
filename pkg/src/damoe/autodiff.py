"""Minimal reverse-mode automatic differentiation over dense float64 matrices.

Every value is a :class:`TensorNode` wrapping a 2-d numpy array. Operations
record themselves on a global :class:`Tape` in creation order; calling
:func:`backward` on a scalar node sweeps the tape in exact reverse creation
order, accumulating gradients (``+=``) into every node that requires them.

Parameters are nodes created with :func:`parameter`; they are never placed
on the tape, so clearing the tape between optimization steps frees all
intermediate values while parameters persist.

The tape is single-threaded. Forward-only evaluation under :func:`no_grad`
performs no recording and is safe to run concurrently.
"""

from contextlib import contextmanager

import numpy as np
from scipy.special import expit

from . import kernels


class TensorNode:
    """A dense matrix participating in the differentiable computation."""

    __slots__ = ("data", "requires_grad", "_grad", "_backward")

    def __init__(self, data, requires_grad=False):
        self.data = data
        self.requires_grad = requires_grad
        self._grad = None
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def grad(self):
        if self._grad is None:
            self._grad = np.zeros_like(self.data)
        return self._grad

    def accumulate_grad(self, g):
        if self._grad is None:
            self._grad = np.array(np.broadcast_to(g, self.data.shape))
        else:
            self._grad += g

    def zero_grad(self):
        self._grad = None

    def __repr__(self):
        return f"TensorNode(shape={self.data.shape}, requires_grad={self.requires_grad})"


class Tape:
    """Ordered record of op outputs; backward visits it in reverse."""

    def __init__(self):
        self.nodes = []

    def append(self, node):
        self.nodes.append(node)

    def clear(self):
        self.nodes.clear()

    def __len__(self):
        return len(self.nodes)


_tape = Tape()
_grad_enabled = True


def active_tape():
    return _tape


def clear_tape():
    _tape.clear()


@contextmanager
def no_grad():
    """Disable tape recording; forward passes become pure numpy."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def _as_matrix(data):
    a = np.asarray(data, dtype=np.float64)
    if a.ndim == 0:
        a = a.reshape(1, 1)
    elif a.ndim == 1:
        a = a.reshape(1, -1)
    elif a.ndim != 2:
        raise ValueError(f"expected at most 2 dimensions, got shape {a.shape}")
    return a


def constant(data):
    """Wrap data as a non-trainable node (zero grad under any backward)."""
    return TensorNode(_as_matrix(data), requires_grad=False)


def parameter(data):
    """Wrap data as a trainable node; lives off-tape, persists across steps."""
    return TensorNode(_as_matrix(data).copy(), requires_grad=True)


def _record(out_data, backward_fn, *parents):
    """Create an op output node, registering the backward rule on the tape."""
    if _grad_enabled and any(p.requires_grad for p in parents):
        out = TensorNode(out_data, requires_grad=True)
        out._backward = backward_fn
        _tape.append(out)
    else:
        out = TensorNode(out_data, requires_grad=False)
    return out


def _coerce(x):
    return x if isinstance(x, TensorNode) else constant(x)


def _unbroadcast(g, shape):
    """Reduce a gradient back to the shape numpy broadcast it from."""
    if g.shape == shape:
        return g
    out = g
    if shape[0] == 1 and out.shape[0] != 1:
        out = out.sum(axis=0, keepdims=True)
    if shape[1] == 1 and out.shape[1] != 1:
        out = out.sum(axis=1, keepdims=True)
    return out


# ---------------------------------------------------------------------------
# elementwise arithmetic (numpy broadcasting semantics)
# ---------------------------------------------------------------------------

def add(a, b):
    a, b = _coerce(a), _coerce(b)
    out_data = a.data + b.data

    def backward_fn(g):
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(g, b.data.shape))

    return _record(out_data, backward_fn, a, b)


def sub(a, b):
    a, b = _coerce(a), _coerce(b)
    out_data = a.data - b.data

    def backward_fn(g):
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(-g, b.data.shape))

    return _record(out_data, backward_fn, a, b)


def mul(a, b):
    a, b = _coerce(a), _coerce(b)
    out_data = a.data * b.data

    def backward_fn(g):
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(g * a.data, b.data.shape))

    return _record(out_data, backward_fn, a, b)


def div(a, b):
    a, b = _coerce(a), _coerce(b)
    out_data = a.data / b.data

    def backward_fn(g):
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(g / b.data, a.data.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

    return _record(out_data, backward_fn, a, b)


def matmul(a, b):
    """Matrix product; backward accumulates dA = g Bᵀ and dB = Aᵀ g."""
    a, b = _coerce(a), _coerce(b)
    if a.data.shape[1] != b.data.shape[0]:
        raise ValueError(
            f"matmul dimension mismatch: {a.data.shape} x {b.data.shape}"
        )
    out_data = a.data @ b.data

    def backward_fn(g):
        if a.requires_grad:
            a.accumulate_grad(g @ b.data.T)
        if b.requires_grad:
            b.accumulate_grad(a.data.T @ g)

    return _record(out_data, backward_fn, a, b)


# ---------------------------------------------------------------------------
# elementwise nonlinearities
# ---------------------------------------------------------------------------

def relu(x):
    x = _coerce(x)
    out_data = np.maximum(x.data, 0.0)

    def backward_fn(g):
        if x.requires_grad:
            x.accumulate_grad(g * (x.data > 0.0))

    return _record(out_data, backward_fn, x)


def exp(x):
    x = _coerce(x)
    out_data = np.exp(x.data)

    def backward_fn(g):
        if x.requires_grad:
            x.accumulate_grad(g * out_data)

    return _record(out_data, backward_fn, x)


def log(x):
    x = _coerce(x)
    out_data = np.log(x.data)

    def backward_fn(g):
        if x.requires_grad:
            x.accumulate_grad(g / x.data)

    return _record(out_data, backward_fn, x)


def sigmoid(x):
    x = _coerce(x)
    out_data = expit(x.data)

    def backward_fn(g):
        if x.requires_grad:
            x.accumulate_grad(g * out_data * (1.0 - out_data))

    return _record(out_data, backward_fn, x)


def softplus_values(x):
    """Overflow-safe log(1 + exp(x)) on a plain array."""
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


def softplus(x):
    """Elementwise log(1 + exp(x)); gradient is sigmoid(x)."""
    x = _coerce(x)
    out_data = softplus_values(x.data)

    def backward_fn(g):
        if x.requires_grad:
            x.accumulate_grad(g * expit(x.data))

    return _record(out_data, backward_fn, x)


# ---------------------------------------------------------------------------
# row gather / scatter (neighbor aggregation)
# ---------------------------------------------------------------------------

def scatter_add_rows(src, dst_index, n_rows):
    """Sum source rows into destination rows: out[j] = Σ src[i] over dst_index[i]==j.

    The backward pass gathers the output gradient back to the source rows.
    """
    src = _coerce(src)
    idx = np.asarray(dst_index, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= n_rows):
        bad = idx[(idx < 0) | (idx >= n_rows)][0]
        raise IndexError(f"scatter index {bad} out of range [0, {n_rows})")
    if idx.size == 0:
        out_data = np.zeros((n_rows, src.data.shape[1]))
    else:
        out_data = kernels.scatter_add_rows(src.data, idx, n_rows)

    def backward_fn(g):
        if src.requires_grad and idx.size:
            src.accumulate_grad(g[idx])

    return _record(out_data, backward_fn, src)


def gather_rows(x, indices):
    """Select rows by index; backward scatter-adds gradients back."""
    x = _coerce(x)
    idx = np.asarray(indices, dtype=np.int64)
    n = x.data.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        bad = idx[(idx < 0) | (idx >= n)][0]
        raise IndexError(f"gather index {bad} out of range [0, {n})")
    out_data = kernels.gather_rows(x.data, idx) if idx.size else np.zeros((0, x.data.shape[1]))

    def backward_fn(g):
        if x.requires_grad and idx.size:
            x.accumulate_grad(kernels.scatter_add_rows(g, idx, n))

    return _record(out_data, backward_fn, x)


def take_column(x, col):
    """Slice one column as an m×1 node."""
    x = _coerce(x)
    if not 0 <= col < x.data.shape[1]:
        raise IndexError(f"column {col} out of range [0, {x.data.shape[1]})")
    out_data = x.data[:, col:col + 1].copy()

    def backward_fn(g):
        if x.requires_grad:
            full = np.zeros_like(x.data)
            full[:, col:col + 1] = g
            x.accumulate_grad(full)

    return _record(out_data, backward_fn, x)


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------

def row_sum(x):
    x = _coerce(x)
    out_data = x.data.sum(axis=1, keepdims=True)

    def backward_fn(g):
        if x.requires_grad:
            x.accumulate_grad(np.broadcast_to(g, x.data.shape).copy())

    return _record(out_data, backward_fn, x)


def row_mean(x):
    x = _coerce(x)
    d = x.data.shape[1]
    out_data = x.data.mean(axis=1, keepdims=True)

    def backward_fn(g):
        if x.requires_grad:
            x.accumulate_grad(np.broadcast_to(g / d, x.data.shape).copy())

    return _record(out_data, backward_fn, x)


def sum_pool_rows(x):
    """Column-wise sum over rows: n×d → 1×d."""
    x = _coerce(x)
    out_data = x.data.sum(axis=0, keepdims=True)

    def backward_fn(g):
        if x.requires_grad:
            x.accumulate_grad(np.broadcast_to(g, x.data.shape).copy())

    return _record(out_data, backward_fn, x)


def mean_pool_rows(x):
    """Column-wise mean over rows: n×d → 1×d."""
    x = _coerce(x)
    n = x.data.shape[0]
    out_data = x.data.mean(axis=0, keepdims=True)

    def backward_fn(g):
        if x.requires_grad:
            x.accumulate_grad(np.broadcast_to(g / n, x.data.shape).copy())

    return _record(out_data, backward_fn, x)


def sum_all(x):
    x = _coerce(x)
    out_data = np.array([[x.data.sum()]])

    def backward_fn(g):
        if x.requires_grad:
            x.accumulate_grad(np.full_like(x.data, g[0, 0]))

    return _record(out_data, backward_fn, x)


def mean_all(x):
    x = _coerce(x)
    size = x.data.size
    out_data = np.array([[x.data.mean()]])

    def backward_fn(g):
        if x.requires_grad:
            x.accumulate_grad(np.full_like(x.data, g[0, 0] / size))

    return _record(out_data, backward_fn, x)


# ---------------------------------------------------------------------------
# masked softmax and fused losses
# ---------------------------------------------------------------------------

def masked_softmax(logits, mask):
    """Softmax over masked-true entries of each row; masked-false outputs are 0.

    ``mask`` is a boolean sequence (for a single row) or a boolean array of
    the same shape as ``logits``. Every row must select at least one entry.
    """
    logits = _coerce(logits)
    m = np.asarray(mask, dtype=bool)
    if m.ndim == 1:
        m = np.broadcast_to(m, logits.data.shape).copy()
    if m.shape != logits.data.shape:
        raise ValueError(f"mask shape {m.shape} does not match logits shape {logits.data.shape}")
    if not m.any(axis=1).all():
        raise ValueError("invalid selection: mask selects no entries in some row")

    shifted = np.where(m, logits.data, -np.inf)
    shifted = shifted - shifted.max(axis=1, keepdims=True)
    e = np.where(m, np.exp(shifted), 0.0)
    out_data = e / e.sum(axis=1, keepdims=True)

    def backward_fn(g):
        if logits.requires_grad:
            inner = (g * out_data).sum(axis=1, keepdims=True)
            logits.accumulate_grad(out_data * (g - inner))

    return _record(out_data, backward_fn, logits)


def cross_entropy_logits(logits, labels, mask=None):
    """Mean softmax cross-entropy of integer labels over (optionally masked) rows."""
    logits = _coerce(logits)
    z = logits.data
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if labels.shape[0] != z.shape[0]:
        raise ValueError(f"expected {z.shape[0]} labels, got {labels.shape[0]}")
    rows = np.arange(z.shape[0]) if mask is None else np.flatnonzero(np.asarray(mask, dtype=bool))
    if rows.size == 0:
        raise ValueError("no rows selected for cross entropy")
    if labels[rows].min() < 0 or labels[rows].max() >= z.shape[1]:
        bad = labels[rows][(labels[rows] < 0) | (labels[rows] >= z.shape[1])][0]
        raise ValueError(f"label {bad} out of range [0, {z.shape[1]})")

    shifted = z[rows] - z[rows].max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    losses = lse[:, 0] - shifted[np.arange(rows.size), labels[rows]]
    out_data = np.array([[losses.mean()]])

    def backward_fn(g):
        if logits.requires_grad:
            probs = np.exp(shifted - lse)
            probs[np.arange(rows.size), labels[rows]] -= 1.0
            full = np.zeros_like(z)
            full[rows] = probs * (g[0, 0] / rows.size)
            logits.accumulate_grad(full)

    return _record(out_data, backward_fn, logits)


def bce_with_logits(scores, targets):
    """Mean binary cross-entropy of 0/1 targets against raw scores (m×1)."""
    scores = _coerce(scores)
    z = scores.data
    y = np.asarray(targets, dtype=np.float64).reshape(z.shape)
    out_data = np.array([[np.mean(softplus_values(z) - z * y)]])

    def backward_fn(g):
        if scores.requires_grad:
            scores.accumulate_grad((expit(z) - y) * (g[0, 0] / z.size))

    return _record(out_data, backward_fn, scores)


# ---------------------------------------------------------------------------
# reverse sweep
# ---------------------------------------------------------------------------

def backward(loss):
    """Accumulate d loss / d node into every requires_grad ancestor of loss.

    ``loss`` must be 1×1. The sweep visits tape nodes in exact reverse
    creation order; nodes that never received a gradient are skipped (their
    contribution is identically zero).
    """
    if loss.data.shape != (1, 1):
        raise ValueError(f"backward expects a 1x1 scalar, got shape {loss.data.shape}")
    loss.accumulate_grad(np.ones((1, 1)))
    for node in reversed(_tape.nodes):
        if node._grad is not None and node._backward is not None:
            node._backward(node._grad)
