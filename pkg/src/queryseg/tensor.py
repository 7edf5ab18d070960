"""Dense float64 tensors with reverse-mode automatic differentiation.

The recording graph is implicit: every operation whose inputs are being
recorded stores its parent tensors and a backward closure on the output.
Recording is opt-in per tensor via ``requires_grad``; integer artifacts
(pool ids, ranks, gather indices) stay plain numpy arrays and never enter
the graph.

Scope is deliberately small: 0/1/2-d arrays, broadcasting between 2-d,
1-d and scalars, always float64. One graph is single-threaded; separate
graphs may live on separate threads.
"""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

Array = np.ndarray


def _unbroadcast(grad: Array, shape: tuple[int, ...]) -> Array:
    """Reduce a broadcast gradient back to the original operand shape."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    """Dense float64 array, optionally recording operations for backward()."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data: Array = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        # leaves created with requires_grad get a zero gradient up front so
        # parameters unreachable from a loss still read as zero-gradient
        self.grad: Array | None = np.zeros_like(self.data) if requires_grad else None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[], None] | None = None

    # ------------------------------------------------------------------
    # basics

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        else:
            self.grad[...] = 0.0

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # ------------------------------------------------------------------
    # graph plumbing

    def _accumulate(self, g: Array, own: bool = False) -> None:
        """Add a gradient contribution; ``own=True`` promises ``g`` is a fresh
        array this tensor may keep without copying."""
        if not self.requires_grad:
            return
        if g.shape != self.data.shape:
            g = _unbroadcast(g, self.data.shape)
            own = True
        if self.grad is None:
            self.grad = g if own else g.copy()
        else:
            self.grad += g

    def backward(self) -> None:
        """Backpropagate from a scalar loss through the recorded graph."""
        if self.data.size != 1:
            raise ValueError(f"backward() requires a scalar loss, got shape {self.shape}")
        # iterative post-order topological sort; graphs can be deep
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in seen:
                    stack.append((parent, False))
        if self.grad is None:
            self.grad = np.ones_like(self.data)
        else:
            self.grad += 1.0
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward()

    # ------------------------------------------------------------------
    # arithmetic

    @staticmethod
    def _wrap(x) -> "Tensor":
        return x if isinstance(x, Tensor) else Tensor(x)

    def __add__(self, other) -> "Tensor":
        other = Tensor._wrap(other)
        out = _node(self.data + other.data, (self, other))
        if out._parents:
            def backward():
                self._accumulate(out.grad)
                other._accumulate(out.grad)
            out._backward = backward
        return out

    __radd__ = __add__

    def __neg__(self) -> "Tensor":
        out = _node(-self.data, (self,))
        if out._parents:
            def backward():
                self._accumulate(-out.grad, own=True)
            out._backward = backward
        return out

    def __sub__(self, other) -> "Tensor":
        other = Tensor._wrap(other)
        out = _node(self.data - other.data, (self, other))
        if out._parents:
            def backward():
                self._accumulate(out.grad)
                other._accumulate(-out.grad, own=True)
            out._backward = backward
        return out

    def __rsub__(self, other) -> "Tensor":
        return Tensor._wrap(other) - self

    def __mul__(self, other) -> "Tensor":
        other = Tensor._wrap(other)
        out = _node(self.data * other.data, (self, other))
        if out._parents:
            def backward():
                self._accumulate(other.data * out.grad, own=True)
                other._accumulate(self.data * out.grad, own=True)
            out._backward = backward
        return out

    __rmul__ = __mul__

    def __truediv__(self, other) -> "Tensor":
        other = Tensor._wrap(other)
        if np.any(other.data == 0.0):
            raise ZeroDivisionError("tensor division by zero")
        out = _node(self.data / other.data, (self, other))
        if out._parents:
            def backward():
                self._accumulate(out.grad / other.data, own=True)
                other._accumulate(-self.data / (other.data * other.data) * out.grad, own=True)
            out._backward = backward
        return out

    def __rtruediv__(self, other) -> "Tensor":
        return Tensor._wrap(other) / self

    def __pow__(self, p: float) -> "Tensor":
        if not isinstance(p, (int, float)):
            raise TypeError("only scalar exponents are supported")
        y = self.data ** p
        if not np.all(np.isfinite(y)) and np.all(np.isfinite(self.data)):
            raise FloatingPointError(f"power {p} left the finite range")
        out = _node(y, (self,))
        if out._parents:
            def backward():
                self._accumulate(p * self.data ** (p - 1.0) * out.grad, own=True)
            out._backward = backward
        return out

    def __matmul__(self, other) -> "Tensor":
        return matmul(self, Tensor._wrap(other))

    @property
    def T(self) -> "Tensor":
        if self.data.ndim != 2:
            raise ValueError(f"transpose needs a 2-d tensor, got shape {self.shape}")
        out = _node(self.data.T, (self,))
        if out._parents:
            def backward():
                self._accumulate(out.grad.T)
            out._backward = backward
        return out

    # ------------------------------------------------------------------
    # elementwise nonlinearities

    def exp(self) -> "Tensor":
        y = np.exp(self.data)
        if not np.all(np.isfinite(y)) and np.all(np.isfinite(self.data)):
            raise FloatingPointError("exp overflow")
        out = _node(y, (self,))
        if out._parents:
            def backward():
                self._accumulate(y * out.grad, own=True)
            out._backward = backward
        return out

    def log(self) -> "Tensor":
        if np.any(self.data <= 0.0):
            raise ValueError("log of non-positive value")
        out = _node(np.log(self.data), (self,))
        if out._parents:
            def backward():
                self._accumulate(out.grad / self.data, own=True)
            out._backward = backward
        return out

    def sigmoid(self) -> "Tensor":
        x = self.data
        y = np.empty_like(x)
        pos = x >= 0
        y[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
        ex = np.exp(x[~pos])
        y[~pos] = ex / (1.0 + ex)
        out = _node(y, (self,))
        if out._parents:
            def backward():
                self._accumulate(y * (1.0 - y) * out.grad, own=True)
            out._backward = backward
        return out

    def relu(self) -> "Tensor":
        out = _node(np.maximum(self.data, 0.0), (self,))
        if out._parents:
            def backward():
                self._accumulate((self.data > 0.0) * out.grad, own=True)
            out._backward = backward
        return out

    # ------------------------------------------------------------------
    # reductions and reshaping

    def sum(self, axis: int | None = None, keepdims: bool = False) -> "Tensor":
        out = _node(self.data.sum(axis=axis, keepdims=keepdims), (self,))
        if out._parents:
            shape = self.data.shape

            def backward():
                g = out.grad
                if axis is not None and not keepdims:
                    g = np.expand_dims(g, axis)
                self._accumulate(np.broadcast_to(g, shape))
            out._backward = backward
        return out

    def mean(self, axis: int | None = None, keepdims: bool = False) -> "Tensor":
        n = self.data.size if axis is None else self.data.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    def reshape(self, shape: Sequence[int]) -> "Tensor":
        out = _node(self.data.reshape(shape), (self,))
        if out._parents:
            orig = self.data.shape

            def backward():
                self._accumulate(out.grad.reshape(orig))
            out._backward = backward
        return out


def _node(data: Array, parents: tuple[Tensor, ...]) -> Tensor:
    """Create an op output, recording parents only when one of them records."""
    out = Tensor(data)
    recording = tuple(p for p in parents if p.requires_grad)
    if recording:
        out.requires_grad = True
        out.grad = None
        out._parents = recording
    return out


# ----------------------------------------------------------------------
# structural operations


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of two 2-d tensors."""
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ValueError(f"matmul needs 2-d operands, got {a.shape} @ {b.shape}")
    if a.data.shape[1] != b.data.shape[0]:
        raise ValueError(f"matmul inner dimensions disagree: {a.shape} @ {b.shape}")
    out = _node(a.data @ b.data, (a, b))
    if out._parents:
        def backward():
            a._accumulate(out.grad @ b.data.T, own=True)
            b._accumulate(a.data.T @ out.grad, own=True)
        out._backward = backward
    return out


def gather_rows(x: Tensor, idx) -> Tensor:
    """Select rows of ``x`` by index; repeated indices duplicate rows."""
    idx = np.asarray(idx, dtype=np.int64)
    n = x.data.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise IndexError(f"gather_rows index out of range [0, {n})")
    out = _node(x.data[idx], (x,))
    if out._parents:
        def backward():
            g = np.zeros_like(x.data)
            np.add.at(g, idx, out.grad)
            x._accumulate(g, own=True)
        out._backward = backward
    return out


def concat_axis(a: Tensor, b: Tensor, axis: int) -> Tensor:
    """Concatenate two tensors along ``axis``."""
    sa, sb = list(a.data.shape), list(b.data.shape)
    if len(sa) != len(sb):
        raise ValueError(f"concat rank mismatch: {a.shape} vs {b.shape}")
    if any(m != n for ax, (m, n) in enumerate(zip(sa, sb)) if ax != axis % len(sa)):
        raise ValueError(f"concat shapes differ off axis {axis}: {a.shape} vs {b.shape}")
    out = _node(np.concatenate([a.data, b.data], axis=axis), (a, b))
    if out._parents:
        split = a.data.shape[axis]

        def backward():
            ga, gb = np.split(out.grad, [split], axis=axis)
            a._accumulate(ga)
            b._accumulate(gb)
        out._backward = backward
    return out


def reduce_extrema_axis(
    x: Tensor, axis: int, mode: str, keepdims: bool = False
) -> tuple[Tensor, Array]:
    """Extrema along an axis; ties go to the lowest index.

    Returns (values, indices); indices are plain integers outside the
    graph. Gradient flows to the selected (first-occurrence) positions.
    """
    if mode not in ("min", "max"):
        raise ValueError(f"mode must be 'min' or 'max', got {mode!r}")
    argfn = np.argmax if mode == "max" else np.argmin
    idx = argfn(x.data, axis=axis)
    vals = np.take_along_axis(x.data, np.expand_dims(idx, axis), axis=axis)
    if not keepdims:
        vals = np.squeeze(vals, axis=axis)
    out = _node(vals, (x,))
    if out._parents:
        def backward():
            g = out.grad if keepdims else np.expand_dims(out.grad, axis)
            z = np.zeros_like(x.data)
            np.put_along_axis(z, np.expand_dims(idx, axis), g, axis=axis)
            x._accumulate(z, own=True)
        out._backward = backward
    return out, idx


def softmax_axis(x: Tensor, axis: int) -> Tensor:
    """Softmax along ``axis``; slices sum to 1. Shift-stable, fused node."""
    if axis >= x.data.ndim:
        raise ValueError(f"softmax axis {axis} out of range for shape {x.shape}")
    e = np.exp(x.data - np.max(x.data, axis=axis, keepdims=True))
    y = e / e.sum(axis=axis, keepdims=True)
    out = _node(y, (x,))
    if out._parents:
        def backward():
            g = out.grad
            dot = (g * y).sum(axis=axis, keepdims=True)
            x._accumulate((g - dot) * y, own=True)
        out._backward = backward
    return out


def log_softmax_axis(x: Tensor, axis: int) -> Tensor:
    shift = Tensor(np.max(x.data, axis=axis, keepdims=True))
    z = x - shift
    return z - z.exp().sum(axis=axis, keepdims=True).log()


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    mu = x.mean(axis=x.data.ndim - 1, keepdims=True)
    centered = x - mu
    var = (centered * centered).mean(axis=x.data.ndim - 1, keepdims=True)
    return centered * ((var + eps) ** -0.5) * gain + bias


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Affine map x W^T + b with w of shape (out, in)."""
    return matmul(x, w.T) + b


def mlp(x: Tensor, w1: Tensor, b1: Tensor, w2: Tensor, b2: Tensor) -> Tensor:
    """Two-layer perceptron: linear, relu, linear."""
    return linear(linear(x, w1, b1).relu(), w2, b2)


def segment_mean(x: Tensor, segment_ids: Array, num_segments: int) -> Tensor:
    """Average rows of ``x`` grouped by segment id; every segment must occur."""
    seg = np.asarray(segment_ids, dtype=np.int64)
    counts = np.bincount(seg, minlength=num_segments)
    if np.any(counts == 0):
        empty = int(np.flatnonzero(counts == 0)[0])
        raise ValueError(f"segment {empty} has no members")
    cols = x.data.shape[1]
    pooled = np.empty((num_segments, cols), dtype=np.float64)
    for c in range(cols):
        pooled[:, c] = np.bincount(seg, weights=x.data[:, c], minlength=num_segments)
    pooled /= counts[:, None]
    out = _node(pooled, (x,))
    if out._parents:
        inv = 1.0 / counts

        def backward():
            x._accumulate(out.grad[seg] * inv[seg][:, None], own=True)
        out._backward = backward
    return out


def bce_with_logits(logits: Tensor, targets: Array) -> Tensor:
    """Elementwise binary cross entropy on logits, numerically stable."""
    t = np.asarray(targets, dtype=np.float64)
    z = logits.data
    loss = np.maximum(z, 0.0) - z * t + np.log1p(np.exp(-np.abs(z)))
    out = _node(loss, (logits,))
    if out._parents:
        def backward():
            s = 1.0 / (1.0 + np.exp(-np.abs(z)))
            sig = np.where(z >= 0, s, 1.0 - s)
            logits._accumulate((sig - t) * out.grad, own=True)
        out._backward = backward
    return out


# ----------------------------------------------------------------------
# verification


def grad_check(f: Callable[[], Tensor], params: Sequence[Tensor], eps: float = 1e-5) -> float:
    """Compare analytic gradients of a scalar function against central differences.

    ``f`` rebuilds its graph on every call from the live values in ``params``.
    Returns max over parameter entries of |analytic - fd| / max(1, |analytic|).
    """
    for p in params:
        p.zero_grad()
    f().backward()
    analytic = [np.array(p.grad, copy=True) for p in params]
    worst = 0.0
    for p, ga in zip(params, analytic):
        # index-wise updates work for any memory layout (views included)
        for idx in np.ndindex(p.data.shape):
            orig = p.data[idx]
            p.data[idx] = orig + eps
            hi = f().item()
            p.data[idx] = orig - eps
            lo = f().item()
            p.data[idx] = orig
            fd = (hi - lo) / (2.0 * eps)
            err = abs(ga[idx] - fd) / max(1.0, abs(ga[idx]))
            if err > worst:
                worst = err
    return worst
