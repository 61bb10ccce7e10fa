"""Dense matrices with a minimal reverse-mode gradient tape.

The op set is closed and deliberately small: exactly what the graph models
and their training losses need. Broadcasting is limited to row-vector bias
in ``add`` and column-vector scaling in ``mul``/``div`` (needed for row
normalization); everything else is same-shape.

Forward math runs in float32 by default. Gradient checks build float64
tapes (pass ``dtype=np.float64`` to ``tensor``) for numerical headroom.

A tape is confined to one thread; distinct tapes may run concurrently.
Values recorded on the tape are treated as immutable.
"""

from __future__ import annotations

import numpy as np


class Tensor:
    """An n-d value plus tape bookkeeping. Leaves carry requires_grad."""

    __slots__ = ("value", "grad", "requires_grad", "_parents", "_backward_fn", "_used")

    def __init__(self, value, requires_grad=False, parents=(), backward_fn=None):
        self.value = np.asarray(value)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = tuple(parents)
        self._backward_fn = backward_fn
        self._used = False

    @property
    def shape(self):
        return self.value.shape

    @property
    def dtype(self):
        return self.value.dtype

    def __repr__(self):
        return f"Tensor(shape={self.value.shape}, dtype={self.value.dtype}, grad={self.requires_grad})"


def tensor(value, dtype=np.float32, requires_grad=False) -> Tensor:
    """Create a leaf tensor (a constant, or a parameter if requires_grad)."""
    return Tensor(np.asarray(value, dtype=dtype), requires_grad=requires_grad)


def _node(value, parents, backward_fn) -> Tensor:
    """Record an op result. Skips the tape entirely in inference mode."""
    if not any(p.requires_grad for p in parents):
        return Tensor(value)
    return Tensor(value, requires_grad=True, parents=parents, backward_fn=backward_fn)


def _acc(t: Tensor, g: np.ndarray) -> None:
    if t.grad is None:
        t.grad = g
    else:
        t.grad = t.grad + g


def _as_value(x):
    return x.value if isinstance(x, Tensor) else np.asarray(x)


def _reduce_to(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcast gradient back down to the operand's shape."""
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, s in enumerate(shape):
        if s == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g.reshape(shape)


def backward(loss: Tensor, params=()) -> None:
    """Reverse sweep from a scalar loss; populates .grad on reachable tensors.

    Leaves listed in ``params`` that are not on any path to the loss get a
    zero gradient. Calling backward twice on the same loss is an error (the
    tape records values, not a re-runnable program).
    """
    if loss.value.shape != ():
        raise ValueError(f"backward root must be scalar, got shape {loss.value.shape}")
    if loss._used:
        raise RuntimeError("backward already invoked on this loss; re-run the forward pass")
    loss._used = True
    if not loss.requires_grad:
        for p in params:
            p.grad = np.zeros_like(p.value)
        return
    topo: list[Tensor] = []
    seen = set()
    stack = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    loss.grad = np.ones((), dtype=loss.value.dtype)
    for node in reversed(topo):
        if node._backward_fn is not None and node.grad is not None:
            node._backward_fn(node.grad)
    for p in params:
        if p.grad is None:
            p.grad = np.zeros_like(p.value)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product, dL/dA = G @ B^T and dL/dB = A^T @ G."""
    if a.value.shape[-1] != b.value.shape[0]:
        raise ValueError(f"matmul shape mismatch {a.value.shape} x {b.value.shape}")
    out = a.value @ b.value

    def bw(g):
        if a.requires_grad:
            _acc(a, g @ b.value.T)
        if b.requires_grad:
            _acc(b, a.value.T @ g)

    return _node(out, (a, b), bw)


def add(a: Tensor, b) -> Tensor:
    """Elementwise sum; b may be same-shape, a row-vector bias, or a constant array."""
    av, bv = a.value, _as_value(b)
    out = av + bv

    def bw(g):
        if a.requires_grad:
            _acc(a, _reduce_to(g, av.shape))
        if isinstance(b, Tensor) and b.requires_grad:
            _acc(b, _reduce_to(g, bv.shape))

    parents = (a, b) if isinstance(b, Tensor) else (a,)
    return _node(out, parents, bw)


def mul(a: Tensor, b) -> Tensor:
    """Elementwise product; same shape, or a column/row vector against a matrix."""
    av, bv = a.value, _as_value(b)
    out = av * bv

    def bw(g):
        if a.requires_grad:
            _acc(a, _reduce_to(g * bv, av.shape))
        if isinstance(b, Tensor) and b.requires_grad:
            _acc(b, _reduce_to(g * av, bv.shape))

    parents = (a, b) if isinstance(b, Tensor) else (a,)
    return _node(out, parents, bw)


def div(a: Tensor, b) -> Tensor:
    """Elementwise quotient; same broadcasting rules as mul."""
    av, bv = a.value, _as_value(b)
    out = av / bv

    def bw(g):
        if a.requires_grad:
            _acc(a, _reduce_to(g / bv, av.shape))
        if isinstance(b, Tensor) and b.requires_grad:
            _acc(b, _reduce_to(-g * av / (bv * bv), bv.shape))

    parents = (a, b) if isinstance(b, Tensor) else (a,)
    return _node(out, parents, bw)


def scale(a: Tensor, c: float) -> Tensor:
    c = a.value.dtype.type(c)
    return _node(a.value * c, (a,), lambda g: a.requires_grad and _acc(a, g * c))


def add_scalar(a: Tensor, c: float) -> Tensor:
    c = a.value.dtype.type(c)
    return _node(a.value + c, (a,), lambda g: a.requires_grad and _acc(a, g))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.value)
    return _node(out, (a,), lambda g: a.requires_grad and _acc(a, g * out))


def log(a: Tensor) -> Tensor:
    out = np.log(a.value)
    return _node(out, (a,), lambda g: a.requires_grad and _acc(a, g / a.value))


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.value)
    return _node(out, (a,), lambda g: a.requires_grad and _acc(a, g * 0.5 / out))


def leaky_relu(a: Tensor, slope: float = 0.2) -> Tensor:
    if not np.isfinite(slope):
        raise ValueError("leaky_relu slope must be finite")
    s = a.value.dtype.type(slope)
    out = np.where(a.value > 0, a.value, a.value * s)

    def bw(g):
        if a.requires_grad:
            _acc(a, np.where(a.value > 0, g, g * s))

    return _node(out, (a,), bw)


def relu(a: Tensor) -> Tensor:
    return leaky_relu(a, 0.0)


def concat_rows(a: Tensor, b: Tensor) -> Tensor:
    """Row-wise concatenation: output row i is [a_i || b_i]."""
    if a.value.shape[0] != b.value.shape[0]:
        raise ValueError("concat_rows needs matching row counts")
    out = np.concatenate([a.value, b.value], axis=1)
    da = a.value.shape[1]

    def bw(g):
        if a.requires_grad:
            _acc(a, g[:, :da])
        if b.requires_grad:
            _acc(b, g[:, da:])

    return _node(out, (a, b), bw)


def row_sum(a: Tensor) -> Tensor:
    """Sum each row: (N, D) -> (N, 1)."""
    out = a.value.sum(axis=1, keepdims=True)

    def bw(g):
        if a.requires_grad:
            _acc(a, np.broadcast_to(g, a.value.shape).copy())

    return _node(out, (a,), bw)


def sum_all(a: Tensor) -> Tensor:
    out = a.value.sum()

    def bw(g):
        if a.requires_grad:
            _acc(a, np.full_like(a.value, g))

    return _node(out, (a,), bw)


def log_softmax_rows(a: Tensor) -> Tensor:
    """Row-wise log softmax; exp of each output row sums to 1."""
    shifted = a.value - a.value.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    out = shifted - lse
    softmax = np.exp(out)

    def bw(g):
        if a.requires_grad:
            _acc(a, g - softmax * g.sum(axis=1, keepdims=True))

    return _node(out, (a,), bw)


def reshape(a: Tensor, shape) -> Tensor:
    out = a.value.reshape(shape)

    def bw(g):
        if a.requires_grad:
            _acc(a, g.reshape(a.value.shape))

    return _node(out, (a,), bw)


def slice_rows(a: Tensor, start: int, stop: int) -> Tensor:
    """Contiguous row slice; backward scatters into the sliced range."""
    out = a.value[start:stop]

    def bw(g):
        if a.requires_grad:
            full = np.zeros_like(a.value)
            full[start:stop] = g
            _acc(a, full)

    return _node(out, (a,), bw)


def gather_rows(a: Tensor, idx: np.ndarray) -> Tensor:
    """Select rows by index; backward scatter-adds into the source rows."""
    out = a.value[idx]

    def bw(g):
        if a.requires_grad:
            _acc(a, scatter_sum_rows(idx, g, a.value.shape[0]))

    return _node(out, (a,), bw)


def segment_sum(a: Tensor, idx: np.ndarray, num_segments: int) -> Tensor:
    """Sum entries of a (grouped by idx) into num_segments slots."""
    out = scatter_sum_rows(idx, a.value, num_segments)

    def bw(g):
        if a.requires_grad:
            _acc(a, g[idx])

    return _node(out, (a,), bw)


def scatter_sum_rows(idx: np.ndarray, rows: np.ndarray, num_segments: int) -> np.ndarray:
    """Sum rows (or scalars) with the same index; plain numpy helper."""
    out = np.zeros((num_segments,) + rows.shape[1:], dtype=rows.dtype)
    order = np.argsort(idx, kind="stable")
    sorted_idx = idx[order]
    uniq, starts = np.unique(sorted_idx, return_index=True)
    if len(uniq):
        out[uniq] = np.add.reduceat(rows[order], starts, axis=0)
    return out


def nll_loss(log_probs: Tensor, labels: np.ndarray, mask: np.ndarray) -> Tensor:
    """Mean negative log-likelihood over masked rows."""
    rows = np.flatnonzero(mask)
    if len(rows) == 0:
        raise ValueError("no supervised nodes: mask selects zero rows")
    picked = log_probs.value[rows, labels[rows]]
    out = -picked.mean(dtype=log_probs.value.dtype)

    def bw(g):
        if log_probs.requires_grad:
            grad = np.zeros_like(log_probs.value)
            grad[rows, labels[rows]] = -g / log_probs.value.dtype.type(len(rows))
            _acc(log_probs, grad)

    return _node(out, (log_probs,), bw)
