"""Reverse-mode autodiff on dense numpy arrays.

Values are plain ``numpy.ndarray`` (float32 by default, row-major). A
``Tensor`` wraps one array plus an optional gradient slot and a backward
closure; composing ops builds a tape that ``backward()`` walks in reverse
topological order. Reduction order inside every op is fixed, so identical
inputs give bit-identical outputs.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Optional, Sequence, Union

import numpy as np

Array = np.ndarray

DEFAULT_DTYPE = np.float32


class NumericsError(RuntimeError):
    """Raised when an operation hits a non-finite or ill-shaped state."""


_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable tape construction inside the block (inference fast path)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_vjp")

    def __init__(
        self,
        data: Union[Array, float, int, Sequence],
        requires_grad: bool = False,
        _parents: tuple = (),
        _vjp: Optional[Callable[[Array], None]] = None,
    ):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.grad: Optional[Array] = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._vjp = _vjp

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self):
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def accumulate_grad(self, g: Array):
        if self.grad is None:
            self.grad = g.astype(self.data.dtype, copy=True)
        else:
            self.grad += g

    def backward(self, grad: Optional[Array] = None):
        """Backpropagate from this tensor through the recorded tape."""
        if grad is None:
            grad = np.ones_like(self.data)
        topo: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in visited:
                    stack.append((p, False))
        self.grad = np.asarray(grad, dtype=self.data.dtype)
        for node in reversed(topo):
            if node._vjp is not None and node.grad is not None:
                node._vjp(node.grad)

    # -- operator sugar --------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_tensor(other, like=self), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("tensor/tensor division is not supported; use reciprocal ops")
        return mul(self, 1.0 / float(other))

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])

    def transpose(self, *axes):
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"


def as_tensor(x, like: Optional[Tensor] = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.data.dtype if like is not None else DEFAULT_DTYPE
    return Tensor(np.asarray(x, dtype=dtype))


def tensor(data, requires_grad: bool = False, dtype=DEFAULT_DTYPE) -> Tensor:
    return Tensor(np.asarray(data, dtype=dtype), requires_grad=requires_grad)


def constant(data) -> Tensor:
    """Wrap an array as a gradient-free leaf (stop-gradient)."""
    return Tensor(np.asarray(data), requires_grad=False)


def _make(out_data: Array, parents: Iterable[Tensor], vjp: Callable[[Array], None]) -> Tensor:
    parents = tuple(p for p in parents if isinstance(p, Tensor))
    req = _grad_enabled and any(p.requires_grad for p in parents)
    if not req:
        return Tensor(out_data)
    return Tensor(out_data, requires_grad=True, _parents=parents, _vjp=vjp)


def _unbroadcast(grad: Array, shape: tuple) -> Array:
    """Sum `grad` down to `shape` (reverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# -- arithmetic -----------------------------------------------------------

def add(a: Tensor, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, like=a)
    out_data = a.data + b.data

    def vjp(g: Array):
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(g, b.data.shape))

    return _make(out_data, (a, b), vjp)


def sub(a: Tensor, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, like=a)
    out_data = a.data - b.data

    def vjp(g: Array):
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(-g, b.data.shape))

    return _make(out_data, (a, b), vjp)


def mul(a: Tensor, b) -> Tensor:
    a = as_tensor(a)
    if isinstance(b, (int, float, np.floating)):
        scale = float(b)
        out_data = a.data * np.asarray(scale, dtype=a.data.dtype)

        def vjp_scalar(g: Array):
            if a.requires_grad:
                a.accumulate_grad(g * np.asarray(scale, dtype=g.dtype))

        return _make(out_data, (a,), vjp_scalar)
    b = as_tensor(b, like=a)
    out_data = a.data * b.data

    def vjp(g: Array):
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(g * a.data, b.data.shape))

    return _make(out_data, (a, b), vjp)


def square(a: Tensor) -> Tensor:
    return mul(a, a)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, like=a)
    if a.data.shape[-1] != b.data.shape[-2]:
        raise NumericsError(
            f"matmul inner-dimension mismatch: {a.data.shape} @ {b.data.shape}"
        )
    out_data = a.data @ b.data

    def vjp(g: Array):
        if a.requires_grad:
            ga = g @ np.swapaxes(b.data, -1, -2)
            a.accumulate_grad(_unbroadcast(ga, a.data.shape))
        if b.requires_grad:
            gb = np.swapaxes(a.data, -1, -2) @ g
            b.accumulate_grad(_unbroadcast(gb, b.data.shape))

    return _make(out_data, (a, b), vjp)


# -- shape ops ------------------------------------------------------------

def reshape(a: Tensor, shape) -> Tensor:
    a = as_tensor(a)
    out_data = a.data.reshape(shape)

    def vjp(g: Array):
        if a.requires_grad:
            a.accumulate_grad(g.reshape(a.data.shape))

    return _make(out_data, (a,), vjp)


def transpose(a: Tensor, axes) -> Tensor:
    a = as_tensor(a)
    axes = tuple(axes)
    out_data = np.transpose(a.data, axes)
    inv = np.argsort(axes)

    def vjp(g: Array):
        if a.requires_grad:
            a.accumulate_grad(np.transpose(g, inv))

    return _make(out_data, (a,), vjp)


def swap_last(a: Tensor) -> Tensor:
    axes = list(range(a.data.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(a, axes)


# -- reductions -----------------------------------------------------------

def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out_data = a.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g: Array):
        if not a.requires_grad:
            return
        if axis is None:
            a.accumulate_grad(np.broadcast_to(g, a.data.shape))
            return
        g2 = g
        if not keepdims:
            g2 = np.expand_dims(g, axis)
        a.accumulate_grad(np.broadcast_to(g2, a.data.shape))

    return _make(out_data, (a,), vjp)


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    if axis is None:
        n = a.data.size
    elif isinstance(axis, tuple):
        n = int(np.prod([a.data.shape[ax] for ax in axis]))
    else:
        n = a.data.shape[axis]
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / n)


# -- nonlinearities --------------------------------------------------------

def relu(a: Tensor) -> Tensor:
    a = as_tensor(a)
    out_data = np.maximum(a.data, 0)

    def vjp(g: Array):
        if a.requires_grad:
            a.accumulate_grad(g * (a.data > 0))

    return _make(out_data, (a,), vjp)


_GELU_C = 0.7978845608028654  # sqrt(2/pi)


def gelu(a: Tensor) -> Tensor:
    """tanh-form gelu; derivative derived from the same expression."""
    a = as_tensor(a)
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x**3)
    t = np.tanh(inner)
    out_data = 0.5 * x * (1.0 + t)

    def vjp(g: Array):
        if a.requires_grad:
            sech2 = 1.0 - t * t
            d_inner = _GELU_C * (1.0 + 3 * 0.044715 * x * x)
            a.accumulate_grad(g * (0.5 * (1.0 + t) + 0.5 * x * sech2 * d_inner))

    return _make(out_data, (a,), vjp)


def sigmoid(a: Tensor) -> Tensor:
    a = as_tensor(a)
    out_data = 1.0 / (1.0 + np.exp(-a.data))

    def vjp(g: Array):
        if a.requires_grad:
            a.accumulate_grad(g * out_data * (1.0 - out_data))

    return _make(out_data, (a,), vjp)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    ex = np.exp(shifted)
    out_data = ex / ex.sum(axis=axis, keepdims=True)

    def vjp(g: Array):
        if a.requires_grad:
            dot = (g * out_data).sum(axis=axis, keepdims=True)
            a.accumulate_grad(out_data * (g - dot))

    return _make(out_data, (a,), vjp)


# -- gather ops -------------------------------------------------------------

def embedding(table: Tensor, idx: Array) -> Tensor:
    """Row lookup `table[idx]`; backward scatter-adds into the table."""
    table = as_tensor(table)
    idx = np.asarray(idx)
    if idx.size and (idx.min() < 0 or idx.max() >= table.data.shape[0]):
        raise NumericsError(
            f"embedding index out of range [0, {table.data.shape[0]}): "
            f"min={idx.min()}, max={idx.max()}"
        )
    out_data = table.data[idx]

    def vjp(g: Array):
        if table.requires_grad:
            gt = np.zeros_like(table.data)
            np.add.at(gt, idx.reshape(-1), g.reshape(-1, table.data.shape[-1]))
            table.accumulate_grad(gt)

    return _make(out_data, (table,), vjp)


def take_rows(a: Tensor, idx: Array) -> Tensor:
    """Select rows of a 2-D tensor; backward scatter-adds."""
    a = as_tensor(a)
    idx = np.asarray(idx)
    out_data = a.data[idx]

    def vjp(g: Array):
        if a.requires_grad:
            ga = np.zeros_like(a.data)
            np.add.at(ga, idx, g)
            a.accumulate_grad(ga)

    return _make(out_data, (a,), vjp)


def assert_finite(x: Union[Tensor, Array], what: str = "value"):
    data = x.data if isinstance(x, Tensor) else x
    if not np.all(np.isfinite(data)):
        bad = int(np.size(data) - np.isfinite(data).sum())
        raise NumericsError(f"non-finite {what}: {bad} bad element(s) of {np.size(data)}")
