"""Reverse-mode autodiff over dense float64 numpy arrays.

Every operation validates shapes eagerly, computes its forward value
immediately, and — when any input participates in gradient tracking —
records a closure that pushes the output gradient back to its parents.
``backward`` walks the recorded closures in reverse topological order,
visiting each node exactly once.

Teacher-side computations stay off the tape automatically: a node is
recorded only if at least one input is grad-enabled, so forward passes
through frozen parameters build no graph at all.
"""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .exceptions import (
    ContractError,
    DegenerateEmbeddingError,
    DimensionError,
    DomainError,
)

# Row norms below this are treated as collapsed embeddings and raise
# instead of being silently renormalized.
NORM_EPS = 1e-12


class Tensor:
    """Dense float64 array, optionally recording onto the autodiff tape."""

    __slots__ = ("data", "grad", "requires_grad", "grad_enabled", "_parents", "_push_grad")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        self.data = arr
        self.requires_grad = requires_grad
        # Leaves keep a zero-initialized gradient buffer so disconnected
        # parameters read as zero gradient after any backward pass.
        self.grad: np.ndarray | None = np.zeros_like(arr) if requires_grad else None
        self.grad_enabled = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._push_grad: Callable[[np.ndarray], None] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(self.data.shape)

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        """Copy of the value as a fresh constant leaf, off the tape."""
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        else:
            self.grad[...] = 0.0

    def __repr__(self) -> str:
        tag = ", grad" if self.grad_enabled else ""
        return f"Tensor(shape={self.shape}{tag})"


def constant(data) -> Tensor:
    """Wrap an array as a non-differentiable leaf."""
    return Tensor(data)


def _accum(t: Tensor, g: np.ndarray) -> None:
    if not t.grad_enabled:
        return
    if t.grad is None:
        # First touch: copy (g may be a view or shared with siblings).
        t.grad = np.array(g, dtype=np.float64)
        if t.grad.shape != t.data.shape:
            t.grad = np.broadcast_to(t.grad, t.data.shape).copy()
    else:
        t.grad += g


def _make(data: np.ndarray, parents: Sequence[Tensor], push_grad) -> Tensor:
    out = Tensor(data)
    if any(p.grad_enabled for p in parents):
        out.grad_enabled = True
        out._parents = tuple(parents)
        out._push_grad = push_grad
    return out


def _topo_order(root: Tensor) -> list[Tensor]:
    """Recorded nodes reachable from ``root``, parents before children."""
    order: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.grad_enabled and id(p) not in visited:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Populate gradients of every grad-enabled leaf reachable from ``loss``."""
    if loss.data.ndim != 0:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.grad_enabled:
        raise ContractError("loss is not on the tape (no grad-enabled inputs)")
    order = _topo_order(loss)
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._push_grad is not None:
            node._push_grad(node.grad)


# ---------------------------------------------------------------------------
# elementwise primitives


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape`` along axes numpy broadcasting expanded."""
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def add(a: Tensor, b: Tensor) -> Tensor:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"add: shapes {a.shape} and {b.shape} do not broadcast") from None
    out_data = a.data + b.data

    def push(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(g, b.shape))

    return _make(out_data, (a, b), push)


def mul(a: Tensor, b: Tensor) -> Tensor:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"mul: shapes {a.shape} and {b.shape} do not broadcast") from None
    out_data = a.data * b.data

    def push(g):
        _accum(a, _unbroadcast(g * b.data, a.shape))
        _accum(b, _unbroadcast(g * a.data, b.shape))

    return _make(out_data, (a, b), push)


def hadamard(a: Tensor, b: Tensor) -> Tensor:
    """Strict elementwise product; operands must have identical shapes."""
    if a.shape != b.shape:
        raise DimensionError(f"hadamard: shapes {a.shape} and {b.shape} differ")
    return mul(a, b)


def neg(a: Tensor) -> Tensor:
    def push(g):
        _accum(a, -g)

    return _make(-a.data, (a,), push)


def sub(a: Tensor, b: Tensor) -> Tensor:
    return add(a, neg(b))


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)

    def push(g):
        _accum(a, g * s)

    return _make(a.data * s, (a,), push)


def div_scalar(a: Tensor, s: float) -> Tensor:
    s = float(s)
    if s == 0.0:
        raise DomainError("div_scalar: division by zero")

    def push(g):
        _accum(a, g / s)

    return _make(a.data / s, (a,), push)


def add_scalar(a: Tensor, s: float) -> Tensor:
    s = float(s)

    def push(g):
        _accum(a, g)

    return _make(a.data + s, (a,), push)


def sigmoid(a: Tensor) -> Tensor:
    # Split by sign so exp never overflows.
    x = a.data
    e = np.exp(-np.abs(x))
    out_data = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))

    def push(g):
        _accum(a, g * out_data * (1.0 - out_data))

    return _make(out_data, (a,), push)


def tanh(a: Tensor) -> Tensor:
    out_data = np.tanh(a.data)

    def push(g):
        _accum(a, g * (1.0 - out_data * out_data))

    return _make(out_data, (a,), push)


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0

    def push(g):
        _accum(a, g * mask)

    return _make(np.where(mask, a.data, 0.0), (a,), push)


def exp(a: Tensor) -> Tensor:
    out_data = np.exp(a.data)

    def push(g):
        _accum(a, g * out_data)

    return _make(out_data, (a,), push)


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0.0):
        worst = float(a.data.min())
        raise DomainError(f"log: non-positive entry {worst!r}")
    x = a.data

    def push(g):
        _accum(a, g / x)

    return _make(np.log(x), (a,), push)


UNARY_OPS = {"sigmoid": sigmoid, "tanh": tanh, "relu": relu, "exp": exp, "log": log}


# ---------------------------------------------------------------------------
# linear algebra and shape primitives


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError(f"matmul needs 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: inner extents differ, {a.shape} vs {b.shape}")
    out_data = a.data @ b.data

    def push(g):
        _accum(a, g @ b.data.T)
        _accum(b, a.data.T @ g)

    return _make(out_data, (a, b), push)


def transpose(a: Tensor) -> Tensor:
    if a.ndim != 2:
        raise DimensionError(f"transpose needs a 2-D operand, got {a.shape}")

    def push(g):
        _accum(a, g.T)

    return _make(a.data.T.copy(), (a,), push)


def dot(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 1 or b.ndim != 1:
        raise DimensionError(f"dot needs 1-D operands, got {a.shape} and {b.shape}")
    if a.shape != b.shape:
        raise DimensionError(f"dot: lengths differ, {a.shape} vs {b.shape}")
    out_data = np.asarray(a.data @ b.data)

    def push(g):
        _accum(a, g * b.data)
        _accum(b, g * a.data)

    return _make(out_data, (a, b), push)


def sum_all(a: Tensor) -> Tensor:
    def push(g):
        _accum(a, np.broadcast_to(g, a.shape).copy() if a.ndim else g)

    return _make(np.asarray(a.data.sum()), (a,), push)


def sum_last(a: Tensor) -> Tensor:
    """Sum over the last axis, keeping it as an extent of 1."""
    if a.ndim < 1:
        raise DimensionError("sum_last needs at least one axis")
    out_data = a.data.sum(axis=-1, keepdims=True)

    def push(g):
        _accum(a, np.broadcast_to(g, a.shape).copy())

    return _make(out_data, (a,), push)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape, dtype=np.int64)) != a.data.size:
        raise DimensionError(f"reshape: cannot view {a.shape} as {shape}")
    orig = a.shape

    def push(g):
        _accum(a, g.reshape(orig))

    return _make(a.data.reshape(shape), (a,), push)


def concat_last(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != b.ndim:
        raise DimensionError(f"concat_last: ranks differ, {a.shape} vs {b.shape}")
    if a.shape[:-1] != b.shape[:-1]:
        raise DimensionError(f"concat_last: leading extents differ, {a.shape} vs {b.shape}")
    p = a.shape[-1]
    out_data = np.concatenate([a.data, b.data], axis=-1)

    def push(g):
        _accum(a, g[..., :p])
        _accum(b, g[..., p:])

    return _make(out_data, (a, b), push)


def concat_rows(parts: Sequence[Tensor]) -> Tensor:
    if not parts:
        raise DimensionError("concat_rows: empty input list")
    cols = parts[0].shape[1:]
    for t in parts:
        if t.ndim != parts[0].ndim or t.shape[1:] != cols:
            raise DimensionError(f"concat_rows: trailing extents differ, {t.shape} vs {parts[0].shape}")
    out_data = np.concatenate([t.data for t in parts], axis=0)
    offsets = np.cumsum([0] + [t.shape[0] for t in parts])

    def push(g):
        for t, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            _accum(t, g[lo:hi])

    return _make(out_data, tuple(parts), push)


def stack_rows(vectors: Sequence[Tensor]) -> Tensor:
    if not vectors:
        raise DimensionError("stack_rows: empty input list")
    width = vectors[0].shape
    for v in vectors:
        if v.ndim != 1 or v.shape != width:
            raise DimensionError(f"stack_rows: inconsistent row shape {v.shape} vs {width}")
    out_data = np.stack([v.data for v in vectors], axis=0)

    def push(g):
        for i, v in enumerate(vectors):
            _accum(v, g[i])

    return _make(out_data, tuple(vectors), push)


def row(a: Tensor, i: int) -> Tensor:
    if a.ndim != 2:
        raise DimensionError(f"row needs a 2-D operand, got {a.shape}")
    if not 0 <= i < a.shape[0]:
        raise IndexError(f"row index {i} out of range for {a.shape[0]} rows")

    def push(g):
        full = np.zeros(a.shape)
        full[i] = g
        _accum(a, full)

    return _make(a.data[i].copy(), (a,), push)


def broadcast_rows(v: Tensor, n: int) -> Tensor:
    """Tile a vector into ``n`` identical rows; backward sums over rows."""
    if v.ndim != 1:
        raise DimensionError(f"broadcast_rows needs a 1-D operand, got {v.shape}")
    if n < 1:
        raise DimensionError(f"broadcast_rows: row count {n} must be positive")
    out_data = np.broadcast_to(v.data, (n, v.shape[0])).copy()

    def push(g):
        _accum(v, g.sum(axis=0))

    return _make(out_data, (v,), push)


def repeat_each_row(a: Tensor, r: int) -> Tensor:
    """[B, D] -> [B*r, D] with row i occupying the i-th block of r rows."""
    if a.ndim != 2:
        raise DimensionError(f"repeat_each_row needs a 2-D operand, got {a.shape}")
    if r < 1:
        raise DimensionError(f"repeat_each_row: repeat count {r} must be positive")
    b, d = a.shape

    def push(g):
        _accum(a, g.reshape(b, r, d).sum(axis=1))

    return _make(np.repeat(a.data, r, axis=0), (a,), push)


def sum_row_blocks(a: Tensor, r: int) -> Tensor:
    """[B*r, D] -> [B, D], summing each consecutive block of r rows."""
    if a.ndim != 2:
        raise DimensionError(f"sum_row_blocks needs a 2-D operand, got {a.shape}")
    if r < 1 or a.shape[0] % r != 0:
        raise DimensionError(f"sum_row_blocks: row count {a.shape[0]} not divisible by {r}")
    b = a.shape[0] // r
    out_data = a.data.reshape(b, r, a.shape[1]).sum(axis=1)

    def push(g):
        _accum(a, np.repeat(g, r, axis=0))

    return _make(out_data, (a,), push)


def take_per_row(a: Tensor, indices) -> Tensor:
    """Pick one entry per row: out[i] = a[i, indices[i]]."""
    if a.ndim != 2:
        raise DimensionError(f"take_per_row needs a 2-D operand, got {a.shape}")
    idx = np.asarray(indices, dtype=np.int64)
    if idx.ndim != 1 or idx.shape[0] != a.shape[0]:
        raise DimensionError(f"take_per_row: need {a.shape[0]} indices, got shape {tuple(idx.shape)}")
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[1]):
        bad = int(idx[(idx < 0) | (idx >= a.shape[1])][0])
        raise IndexError(f"take_per_row: index {bad} out of range for width {a.shape[1]}")
    rows = np.arange(a.shape[0])
    out_data = a.data[rows, idx].copy()

    def push(g):
        full = np.zeros(a.shape)
        full[rows, idx] = g
        _accum(a, full)

    return _make(out_data, (a,), push)


# ---------------------------------------------------------------------------
# guarded composite primitives


def softmax_last(a: Tensor) -> Tensor:
    """Softmax over the last axis, computed with max-subtraction."""
    if a.ndim < 1:
        raise DimensionError("softmax_last needs at least one axis")
    if a.shape[-1] < 1:
        raise DimensionError("softmax_last: empty last axis")
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=-1, keepdims=True)

    def push(g):
        inner = (g * out_data).sum(axis=-1, keepdims=True)
        _accum(a, out_data * (g - inner))

    return _make(out_data, (a,), push)


def l2_normalize_rows(a: Tensor) -> Tensor:
    """Scale each row to unit Euclidean norm; 1-D input is a single row."""
    if a.ndim not in (1, 2):
        raise DimensionError(f"l2_normalize_rows needs a 1-D or 2-D operand, got {a.shape}")
    norms = np.linalg.norm(a.data, axis=-1, keepdims=True)
    if np.any(norms < NORM_EPS):
        worst = float(norms.min())
        raise DegenerateEmbeddingError(f"row norm {worst!r} below {NORM_EPS!r}")
    out_data = a.data / norms

    def push(g):
        inner = (g * out_data).sum(axis=-1, keepdims=True)
        _accum(a, (g - inner * out_data) / norms)

    return _make(out_data, (a,), push)


def l2_normalize_np(rows: np.ndarray) -> np.ndarray:
    """Tape-free row normalization with the same degeneracy guard."""
    norms = np.linalg.norm(rows, axis=-1, keepdims=True)
    if np.any(norms < NORM_EPS):
        worst = float(norms.min())
        raise DegenerateEmbeddingError(f"row norm {worst!r} below {NORM_EPS!r}")
    return rows / norms
