"""Define-by-run reverse-mode autodiff over dense 2-D float64 arrays.

Every value is stored as a 2-D array; scalars are (1, 1) and 1-D inputs
become row vectors. Elementwise ops broadcast numpy-style and reduce
gradients back to each parent's shape.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ConfigError, NumericError, UsageError

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Build no tape inside the block (evaluation-only forwards)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def _as_array(x) -> np.ndarray:
    arr = np.array(x, dtype=np.float64)
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    elif arr.ndim == 1:
        arr = arr.reshape(1, -1)
    elif arr.ndim > 2:
        raise ConfigError(f"tensors are at most 2-D, got shape {arr.shape}")
    return arr


class Tensor:
    __slots__ = ("value", "grad", "requires_grad", "op", "parents", "_backward", "name")

    def __init__(self, value, requires_grad: bool = False, name: str | None = None):
        self.value = _as_array(value)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.op = "leaf"
        self.parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, int]:
        return self.value.shape

    def __repr__(self):
        tag = f" {self.name}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, op={self.op})"

    def numpy(self) -> np.ndarray:
        return self.value

    def item(self) -> float:
        if self.value.size != 1:
            raise UsageError(f"item() on tensor of shape {self.shape}")
        return float(self.value[0, 0])

    def zero_grad(self):
        self.grad = None

    def _accumulate(self, g: np.ndarray):
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad += g

    def backward(self):
        backward(self)

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scalar_mul(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scalar_mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self):
        return transpose(self)


def tensor(value, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(value, requires_grad=requires_grad, name=name)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(kind: str, value: np.ndarray, parents: Sequence[Tensor],
          backward_fn: Callable[[np.ndarray], None]) -> Tensor:
    """Register an op result on the tape. Public so model code can add fused ops."""
    if not np.all(np.isfinite(value)):
        raise NumericError(f"non-finite output from op '{kind}'")
    out = Tensor.__new__(Tensor)
    out.value = value
    out.grad = None
    out.name = None
    out.op = kind
    needs = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    out.requires_grad = needs
    if needs:
        out.parents = tuple(parents)
        out._backward = backward_fn
    else:
        out.parents = ()
        out._backward = None
    return out


make_op = _make


def _unbroadcast(g: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    if g.shape == shape:
        return g
    if shape[0] == 1 and g.shape[0] != 1:
        g = g.sum(axis=0, keepdims=True)
    if shape[1] == 1 and g.shape[1] != 1:
        g = g.sum(axis=1, keepdims=True)
    return g


def _check_broadcast(kind: str, a: Tensor, b: Tensor) -> tuple[int, int]:
    (ar, ac), (br, bc) = a.shape, b.shape
    rows = ar if ar == br or br == 1 else br if ar == 1 else None
    cols = ac if ac == bc or bc == 1 else bc if ac == 1 else None
    if rows is None or cols is None:
        raise ConfigError(f"{kind}: incompatible shapes {a.shape} and {b.shape}")
    return rows, cols


# ---------------------------------------------------------------- binary ops

def matmul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    if a.shape[1] != b.shape[0]:
        raise ConfigError(f"matmul: inner dims differ, {a.shape} @ {b.shape}")
    value = a.value @ b.value

    def bw(g):
        if a.requires_grad:
            a._accumulate(g @ b.value.T)
        if b.requires_grad:
            b._accumulate(a.value.T @ g)

    return _make("matmul", value, (a, b), bw)


def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _check_broadcast("add", a, b)
    value = a.value + b.value

    def bw(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.shape))

    return _make("add", value, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _check_broadcast("sub", a, b)
    value = a.value - b.value

    def bw(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(-_unbroadcast(g, b.shape))

    return _make("sub", value, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _check_broadcast("mul_elementwise", a, b)
    value = a.value * b.value

    def bw(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.value, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.value, b.shape))

    return _make("mul_elementwise", value, (a, b), bw)


def scalar_mul(a, s: float) -> Tensor:
    a = _wrap(a)
    s = float(s)

    def bw(g):
        a._accumulate(g * s)

    return _make("scalar_mul", a.value * s, (a,), bw)


def block_matmul(m: np.ndarray, a, n_blocks: int) -> Tensor:
    """Left-multiply each of ``n_blocks`` equal row blocks of ``a`` by constant ``m``.

    Same result as kron(I, m) @ a without forming the block-diagonal matrix.
    """
    a = _wrap(a)
    rows, cols = a.shape
    n = m.shape[0]
    if m.shape != (n, n) or rows != n * n_blocks:
        raise ConfigError(f"block_matmul: {n_blocks} blocks of {m.shape} do not fit {a.shape}")
    value = (m @ a.value.reshape(n_blocks, n, cols)).reshape(rows, cols)

    def bw(g):
        a._accumulate((m.T @ g.reshape(n_blocks, n, cols)).reshape(rows, cols))

    return _make("block_matmul", value, (a,), bw)


# ----------------------------------------------------------------- unary ops

def sigmoid(a) -> Tensor:
    a = _wrap(a)
    # tanh form never overflows
    value = 0.5 * (1.0 + np.tanh(0.5 * a.value))

    def bw(g):
        a._accumulate(g * value * (1.0 - value))

    return _make("sigmoid", value, (a,), bw)


def tanh(a) -> Tensor:
    a = _wrap(a)
    value = np.tanh(a.value)

    def bw(g):
        a._accumulate(g * (1.0 - value * value))

    return _make("tanh", value, (a,), bw)


def relu(a) -> Tensor:
    a = _wrap(a)
    mask = a.value > 0
    value = np.where(mask, a.value, 0.0)

    def bw(g):
        a._accumulate(g * mask)

    return _make("relu", value, (a,), bw)


def softplus(a) -> Tensor:
    a = _wrap(a)
    x = a.value
    value = np.logaddexp(0.0, x)

    def bw(g):
        a._accumulate(g * (0.5 * (1.0 + np.tanh(0.5 * x))))

    return _make("softplus", value, (a,), bw)


def log(a) -> Tensor:
    a = _wrap(a)
    if np.any(a.value <= 0):
        raise NumericError("non-finite output from op 'log' (non-positive input)")
    value = np.log(a.value)

    def bw(g):
        a._accumulate(g / a.value)

    return _make("log", value, (a,), bw)


def power(a, p: float) -> Tensor:
    """Elementwise a**p for a constant exponent (used for 1/sqrt in norms)."""
    a = _wrap(a)
    with np.errstate(divide="ignore", invalid="ignore"):
        value = a.value ** p

    def bw(g):
        a._accumulate(g * p * a.value ** (p - 1.0))

    return _make("power", value, (a,), bw)


def transpose(a) -> Tensor:
    a = _wrap(a)

    def bw(g):
        a._accumulate(g.T)

    return _make("transpose", a.value.T.copy(), (a,), bw)


def mean_all(a) -> Tensor:
    a = _wrap(a)
    n = a.value.size

    def bw(g):
        a._accumulate(np.full(a.shape, g[0, 0] / n))

    return _make("mean_all", np.array([[a.value.mean()]]), (a,), bw)


def sum_all(a) -> Tensor:
    a = _wrap(a)

    def bw(g):
        a._accumulate(np.full(a.shape, g[0, 0]))

    return _make("sum_all", np.array([[a.value.sum()]]), (a,), bw)


def concat_cols(parts: Iterable[Tensor]) -> Tensor:
    parts = [_wrap(p) for p in parts]
    rows = {p.shape[0] for p in parts}
    if len(rows) != 1:
        raise ConfigError(f"concat_cols: row counts differ {[p.shape for p in parts]}")
    value = np.concatenate([p.value for p in parts], axis=1)
    bounds = np.cumsum([0] + [p.shape[1] for p in parts])

    def bw(g):
        for p, lo, hi in zip(parts, bounds[:-1], bounds[1:]):
            if p.requires_grad:
                p._accumulate(g[:, lo:hi])

    return _make("concat_cols", value, parts, bw)


def concat_rows(parts: Iterable[Tensor]) -> Tensor:
    parts = [_wrap(p) for p in parts]
    cols = {p.shape[1] for p in parts}
    if len(cols) != 1:
        raise ConfigError(f"concat_rows: column counts differ {[p.shape for p in parts]}")
    value = np.concatenate([p.value for p in parts], axis=0)
    bounds = np.cumsum([0] + [p.shape[0] for p in parts])

    def bw(g):
        for p, lo, hi in zip(parts, bounds[:-1], bounds[1:]):
            if p.requires_grad:
                p._accumulate(g[lo:hi])

    return _make("concat_rows", value, parts, bw)


def row_select(a, rows) -> Tensor:
    """Gather rows by index (slice or int array); repeated indices accumulate."""
    a = _wrap(a)
    idx = np.arange(a.shape[0])[rows] if isinstance(rows, slice) else np.asarray(rows, dtype=int)
    value = a.value[idx]

    def bw(g):
        full = np.zeros(a.shape)
        np.add.at(full, idx, g)
        a._accumulate(full)

    return _make("row_select", value, (a,), bw)


def col_slice(a, start: int, stop: int) -> Tensor:
    a = _wrap(a)
    if not 0 <= start < stop <= a.shape[1]:
        raise ConfigError(f"col_slice [{start}:{stop}] out of range for {a.shape}")

    def bw(g):
        full = np.zeros(a.shape)
        full[:, start:stop] = g
        a._accumulate(full)

    return _make("col_slice", a.value[:, start:stop].copy(), (a,), bw)


# ------------------------------------------------------------------ backprop

def _topo_order(root: Tensor) -> list[Tensor]:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(root: Tensor):
    """Accumulate d(root)/d(leaf) into every reachable requires_grad tensor."""
    if root.shape != (1, 1):
        raise UsageError(f"backward needs a scalar root, got shape {root.shape}")
    if not root.requires_grad:
        return
    order = _topo_order(root)
    root._accumulate(np.ones((1, 1)))
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
            # intermediate grads are not needed once propagated
            node.grad = None
    # leaves keep their grads; interior nodes were cleared above
