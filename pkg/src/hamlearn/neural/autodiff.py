"""A small reverse-mode automatic differentiation engine on numpy arrays.

Only the operations the graph network needs are provided. Every op records its
parents and a closure that pushes the output gradient back to them;
``Tensor.backward`` walks the recorded graph in reverse topological order.
"""
from __future__ import annotations

from typing import Callable, Iterable, List, Optional, Sequence, Tuple

import numpy as np


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self._parents: Tuple["Tensor", ...] = ()
        self._backward: Optional[Callable[[np.ndarray], None]] = None
        self.name = name

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    @property
    def shape(self):
        return self.data.shape

    def zero_grad(self):
        self.grad = None

    def _accumulate(self, g: np.ndarray):
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad += g

    @staticmethod
    def _make(data, parents: Sequence["Tensor"], backward) -> "Tensor":
        out = Tensor(data)
        if any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
        return out

    def backward(self, grad: Optional[np.ndarray] = None):
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without a gradient needs a scalar output")
            grad = np.ones_like(self.data)
        order: List[Tensor] = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                order.append(node)
                continue
            if id(node) in seen or not node.requires_grad:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        self._accumulate(grad)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
                # free intermediate gradients; leaves keep theirs
                if node._parents:
                    node.grad = None

    # -- elementwise ------------------------------------------------------

    def __add__(self, other):
        other = as_tensor(other)
        a, b = self, other

        def bw(g):
            if a.requires_grad:
                a._accumulate(_unbroadcast(g, a.shape))
            if b.requires_grad:
                b._accumulate(_unbroadcast(g, b.shape))

        return Tensor._make(a.data + b.data, (a, b), bw)

    __radd__ = __add__

    def __neg__(self):
        a = self
        return Tensor._make(-a.data, (a,), lambda g: a._accumulate(-g))

    def __sub__(self, other):
        return self + (-as_tensor(other))

    def __rsub__(self, other):
        return as_tensor(other) + (-self)

    def __mul__(self, other):
        other = as_tensor(other)
        a, b = self, other

        def bw(g):
            if a.requires_grad:
                a._accumulate(_unbroadcast(g * b.data, a.shape))
            if b.requires_grad:
                b._accumulate(_unbroadcast(g * a.data, b.shape))

        return Tensor._make(a.data * b.data, (a, b), bw)

    __rmul__ = __mul__

    def __matmul__(self, other):
        a, b = self, as_tensor(other)

        def bw(g):
            if a.requires_grad:
                a._accumulate(g @ b.data.T)
            if b.requires_grad:
                b._accumulate(a.data.T @ g)

        return Tensor._make(a.data @ b.data, (a, b), bw)

    def square(self):
        a = self
        return Tensor._make(a.data * a.data, (a,), lambda g: a._accumulate(2.0 * a.data * g))

    def softplus(self):
        a = self
        x = a.data
        out = np.logaddexp(0.0, x)

        def bw(g):
            # d softplus / dx = sigmoid(x), written to avoid overflow
            sig = np.exp(-np.logaddexp(0.0, -x))
            a._accumulate(g * sig)

        return Tensor._make(out, (a,), bw)

    def sum(self):
        a = self
        return Tensor._make(a.data.sum(), (a,), lambda g: a._accumulate(np.broadcast_to(g, a.shape)))

    def reshape(self, *shape):
        a = self
        return Tensor._make(a.data.reshape(*shape), (a,), lambda g: a._accumulate(g.reshape(a.shape)))

    # -- indexing ---------------------------------------------------------

    def take_rows(self, index: np.ndarray, segments: Optional["Segments"] = None):
        """Rows ``self[index]``. ``segments`` (built on ``index``) makes backward a
        deterministic sorted reduction instead of ``np.add.at``."""
        a = self
        index = np.asarray(index)

        def bw(g):
            if segments is not None:
                a._accumulate(segments.sum(g))
            else:
                acc = np.zeros_like(a.data)
                np.add.at(acc, index, g)
                a._accumulate(acc)

        return Tensor._make(a.data[index], (a,), bw)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def concat(parts: Sequence[Tensor], axis: int = 1) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    sizes = [p.shape[axis] for p in parts]
    bounds = np.cumsum([0] + sizes)

    def bw(g):
        for p, lo, hi in zip(parts, bounds[:-1], bounds[1:]):
            if p.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(lo, hi)
                p._accumulate(g[tuple(sl)])

    return Tensor._make(np.concatenate([p.data for p in parts], axis=axis), parts, bw)


class Segments:
    """Grouping of rows by an integer key in ``[0, n_segments)``.

    Rows are reduced in a fixed order (stable sort by key), so results do not
    depend on floating-point accumulation order across calls.
    """

    def __init__(self, keys: np.ndarray, n_segments: int):
        keys = np.asarray(keys, dtype=np.int64)
        self.keys = keys
        self.n = int(n_segments)
        self.order = np.argsort(keys, kind="stable")
        self.counts = np.bincount(keys, minlength=self.n)
        self.nonempty = self.counts > 0
        starts = np.concatenate([[0], np.cumsum(self.counts)[:-1]])
        self.starts = starts[self.nonempty]

    def _reduce(self, ufunc, x: np.ndarray) -> np.ndarray:
        out = np.zeros((self.n,) + x.shape[1:])
        if x.shape[0]:
            out[self.nonempty] = ufunc.reduceat(x[self.order], self.starts, axis=0)
        return out

    def sum(self, x: np.ndarray) -> np.ndarray:
        return self._reduce(np.add, x)

    def max(self, x: np.ndarray) -> np.ndarray:
        return self._reduce(np.maximum, x)

    def min(self, x: np.ndarray) -> np.ndarray:
        return self._reduce(np.minimum, x)


def segment_sum(x: Tensor, seg: Segments) -> Tensor:
    def bw(g):
        x._accumulate(g[seg.keys])

    return Tensor._make(seg.sum(x.data), (x,), bw)


def segment_mean(x: Tensor, seg: Segments) -> Tensor:
    denom = np.maximum(seg.counts, 1).astype(np.float64).reshape((-1,) + (1,) * (x.data.ndim - 1))

    def bw(g):
        x._accumulate((g / denom)[seg.keys])

    return Tensor._make(seg.sum(x.data) / denom, (x,), bw)


def _segment_extreme(x: Tensor, seg: Segments, which: str) -> Tensor:
    out = seg.max(x.data) if which == "max" else seg.min(x.data)

    def bw(g):
        # ties share the gradient equally, which keeps the op permutation invariant
        hit = (x.data == out[seg.keys]).astype(np.float64)
        ties = seg.sum(hit)
        ties[ties == 0] = 1.0
        x._accumulate(hit * (g / ties)[seg.keys])

    return Tensor._make(out, (x,), bw)


def segment_max(x: Tensor, seg: Segments) -> Tensor:
    return _segment_extreme(x, seg, "max")


def segment_min(x: Tensor, seg: Segments) -> Tensor:
    return _segment_extreme(x, seg, "min")


def parameters_grad_vector(params: Iterable[Tensor]) -> np.ndarray:
    return np.concatenate([(p.grad if p.grad is not None else np.zeros_like(p.data)).ravel() for p in params])
