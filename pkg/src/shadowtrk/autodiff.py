"""A small reverse-mode tape over dense float64 matrices.

Only the operations an Interaction GNN needs are provided: linear layers,
column concatenation, row gather, indexed scatter-add, elementwise
activations and weighted binary cross-entropy on logits. Every recorded
node keeps the arrays its backward rule reads, so the tape doubles as the
activation-memory account of a forward pass.
"""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np
import scipy.sparse

__all__ = [
    "Tape",
    "Tensor",
    "Gradients",
    "linear",
    "concat_cols",
    "gather_rows",
    "scatter_add",
    "activation",
    "bce_with_logits",
    "sum_all",
    "IndexPlan",
]

ACTIVATIONS = ("relu", "sigmoid", "tanh", "identity")


def _check_finite(data: np.ndarray, where: str) -> None:
    # one reduction first; the elementwise scan only runs if it is suspicious
    if data.size and not np.isfinite(data.sum()):
        if not np.isfinite(data).all():
            raise FloatingPointError(f"non-finite values produced by {where}")


class Tensor:
    """A 2-d float64 array, optionally registered on a tape."""

    __slots__ = ("data", "tape", "node_id", "name")

    def __init__(self, data, tape: "Tape | None" = None, node_id: int | None = None, name: str | None = None):
        data = np.asarray(data, dtype=np.float64)
        if data.ndim != 2:
            raise ValueError(f"tensors are 2-d, got shape {data.shape}")
        self.data = data
        self.tape = tape
        self.node_id = node_id
        self.name = name

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, node={self.node_id})"


class Gradients:
    """Result of :meth:`Tape.backward`; unreachable tensors get zeros."""

    def __init__(self, grads: dict[int, np.ndarray]):
        self._grads = grads

    def __getitem__(self, t: Tensor) -> np.ndarray:
        g = self._grads.get(t.node_id) if t.node_id is not None else None
        return np.zeros(t.shape) if g is None else g

    def __contains__(self, t: Tensor) -> bool:
        return t.node_id in self._grads


class Tape:
    """Records operations in execution order (a valid topological order)."""

    def __init__(self):
        self._parents: list[tuple[int, ...]] = []
        self._backward: list[Callable | None] = []
        self._shapes: list[tuple[int, int]] = []
        self._saved: list[int] = []
        self._consumed = False
        self.marks: dict[str, int] = {}

    def __len__(self):
        return len(self._parents)

    def leaf(self, data, name: str | None = None) -> Tensor:
        """Register an input or parameter; gradients flow back to it."""
        t = Tensor(data, self, len(self._parents), name)
        _check_finite(t.data, f"leaf {name or ''}")
        self._parents.append(())
        self._backward.append(None)
        self._shapes.append(t.shape)
        self._saved.append(0)
        return t

    def record(self, out: np.ndarray, parents: Sequence[Tensor], backward: Callable, check: bool = True) -> Tensor:
        if self._consumed:
            raise RuntimeError("tape already consumed by backward; record a new one")
        if check:
            _check_finite(out, getattr(backward, "__qualname__", "op"))
        ids = tuple(p.node_id if p.tape is self else -1 for p in parents)
        t = Tensor(out, self, len(self._parents))
        self._parents.append(ids)
        self._backward.append(backward)
        self._shapes.append(out.shape)
        self._saved.append(out.size)
        return t

    def retained_elements(self) -> int:
        """Elements of every op output recorded so far (held until backward)."""
        return int(sum(self._saved))

    def mark(self, label: str) -> None:
        self.marks[label] = self.retained_elements()

    def backward(self, loss: Tensor) -> Gradients:
        if self._consumed:
            raise RuntimeError("backward called twice on the same tape")
        if loss.tape is not self or loss.shape != (1, 1):
            raise ValueError("loss must be a 1x1 tensor recorded on this tape")
        self._consumed = True
        grads: dict[int, np.ndarray] = {loss.node_id: np.ones((1, 1))}
        for node in range(loss.node_id, -1, -1):
            g = grads.get(node)
            if g is None or self._backward[node] is None:
                continue
            for pid, pg in zip(self._parents[node], self._backward[node](g)):
                if pid < 0 or pg is None:
                    continue
                if pid in grads:
                    grads[pid] = grads[pid] + pg
                else:
                    grads[pid] = pg
            if self._parents[node]:
                del grads[node]
        return Gradients(grads)


def _tape_of(*ts: Tensor) -> Tape | None:
    for t in ts:
        if t.tape is not None:
            return t.tape
    return None


def _wrap(out: np.ndarray, parents, backward, check: bool = True) -> Tensor:
    # copy-only ops pass check=False: their inputs were already checked
    tape = _tape_of(*parents)
    if tape is None:
        if check:
            _check_finite(out, getattr(backward, "__qualname__", "op"))
        return Tensor(out)
    return tape.record(out, parents, backward, check)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """x @ w + b, with b a 1 x q row broadcast over rows."""
    if x.shape[1] != w.shape[0]:
        raise ValueError(f"linear: input width {x.shape[1]} != weight rows {w.shape[0]}")
    if b is not None and b.shape != (1, w.shape[1]):
        raise ValueError(f"linear: bias shape {b.shape} != (1, {w.shape[1]})")
    xd, wd = x.data, w.data
    out = xd @ wd
    if b is not None:
        out += b.data

    need_x = x.tape is not None

    def linear_backward(g):
        gx = g @ wd.T if need_x else None
        return gx, xd.T @ g, (g.sum(axis=0, keepdims=True) if b is not None else None)

    parents = (x, w) if b is None else (x, w, b)
    return _wrap(out, parents, linear_backward)


def concat_cols(xs: Sequence[Tensor]) -> Tensor:
    if not xs:
        raise ValueError("concat_cols needs at least one tensor")
    rows = xs[0].shape[0]
    if any(x.shape[0] != rows for x in xs):
        raise ValueError("concat_cols: row counts differ")
    if len(xs) == 1:
        return xs[0]
    widths = [x.shape[1] for x in xs]
    cuts = np.cumsum(widths)[:-1]
    out = np.concatenate([x.data for x in xs], axis=1)

    def concat_backward(g):
        return np.split(g, cuts, axis=1)

    return _wrap(out, tuple(xs), concat_backward, check=False)


class IndexPlan:
    """An index vector with its n x len(idx) incidence matrix prebuilt.

    Scatter-add becomes one sparse-times-dense product; build one plan per
    index vector and reuse it across layers and in backward.
    """

    __slots__ = ("idx", "n", "_incidence")

    def __init__(self, idx, n: int):
        idx = np.asarray(idx, dtype=np.int64)
        if idx.ndim != 1:
            raise ValueError("index must be 1-d")
        if idx.size and (idx.min() < 0 or idx.max() >= n):
            raise IndexError(f"index out of range for {n} rows")
        self.idx, self.n = idx, n
        order = np.argsort(idx, kind="stable")
        indptr = np.zeros(n + 1, dtype=np.int64)
        np.cumsum(np.bincount(idx, minlength=n), out=indptr[1:])
        self._incidence = scipy.sparse.csr_matrix((np.ones(idx.size), order, indptr), shape=(n, idx.size))

    def scatter(self, y: np.ndarray) -> np.ndarray:
        return np.asarray(self._incidence @ y)


def _plan(idx, n: int, where: str) -> IndexPlan:
    if isinstance(idx, IndexPlan):
        if idx.n != n:
            raise IndexError(f"{where}: index plan built for {idx.n} rows, not {n}")
        return idx
    try:
        return IndexPlan(idx, n)
    except IndexError as exc:
        raise IndexError(f"{where}: {exc}") from None


def gather_rows(x: Tensor, idx) -> Tensor:
    """out[i] = x[idx[i]]; repeated indices accumulate in backward."""
    plan = _plan(idx, x.shape[0], "gather_rows")
    out = x.data[plan.idx]

    def gather_backward(g):
        return (plan.scatter(g),)

    return _wrap(out, (x,), gather_backward, check=False)


def scatter_add(y: Tensor, idx, n: int) -> Tensor:
    """out[v] = sum of y[i] over i with idx[i] == v."""
    plan = _plan(idx, n, "scatter_add")
    if plan.idx.size != y.shape[0]:
        raise ValueError("scatter_add: one index per row of y required")
    out = plan.scatter(y.data)

    def scatter_backward(g):
        return (g[plan.idx],)

    return _wrap(out, (y,), scatter_backward)


def activation(x: Tensor, kind: str) -> Tensor:
    xd = x.data
    if kind == "identity":
        return x
    if kind == "relu":
        out = np.maximum(xd, 0.0)

        def relu_backward(g):
            return (g * (xd > 0.0),)

        return _wrap(out, (x,), relu_backward)
    if kind == "sigmoid":
        out = 0.5 * (1.0 + np.tanh(0.5 * xd))

        def sigmoid_backward(g):
            return (g * out * (1.0 - out),)

        return _wrap(out, (x,), sigmoid_backward)
    if kind == "tanh":
        out = np.tanh(xd)

        def tanh_backward(g):
            return (g * (1.0 - out * out),)

        return _wrap(out, (x,), tanh_backward)
    raise ValueError(f"unknown activation {kind!r}; expected one of {ACTIVATIONS}")


def bce_with_logits(logits: Tensor, labels, pos_weight: float = 1.0, weights=None) -> Tensor:
    """Mean weighted binary cross-entropy, 1x1.

    Per edge: -(w_pos * y * log s(z) + (1 - y) * log(1 - s(z))), evaluated
    through softplus so large |z| never overflows. ``weights`` optionally
    masks edges (0/1) before the mean over selected edges.
    """
    z = logits.data.reshape(-1)
    y = np.asarray(labels, dtype=np.float64).reshape(-1)
    if z.size == 0:
        raise ValueError("bce_with_logits: empty edge set")
    if y.shape != z.shape:
        raise ValueError("bce_with_logits: labels length differs from logits")
    if np.any((y != 0.0) & (y != 1.0)):
        raise ValueError("bce_with_logits: labels must be 0 or 1")
    w = np.ones_like(z) if weights is None else np.asarray(weights, dtype=np.float64).reshape(-1)
    denom = w.sum()
    if denom <= 0:
        raise ValueError("bce_with_logits: no edges selected")
    # softplus(-z) = -log s(z), softplus(z) = -log(1 - s(z))
    sp_neg = np.logaddexp(0.0, -z)
    sp_pos = np.logaddexp(0.0, z)
    per_edge = pos_weight * y * sp_neg + (1.0 - y) * sp_pos
    loss = np.array([[np.dot(w, per_edge) / denom]])
    sig = 0.5 * (1.0 + np.tanh(0.5 * z))

    def bce_backward(g):
        d = pos_weight * y * (sig - 1.0) + (1.0 - y) * sig
        return ((g[0, 0] * w * d / denom).reshape(-1, 1),)

    return _wrap(loss, (logits,), bce_backward)


def sum_all(x: Tensor) -> Tensor:
    shape = x.shape

    def sum_backward(g):
        return (np.full(shape, g[0, 0]),)

    return _wrap(np.array([[x.data.sum()]]), (x,), sum_backward)
