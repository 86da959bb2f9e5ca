"""Minimal reverse-mode automatic differentiation on dense numpy arrays.

Double precision throughout; the op set is exactly what the graph-QA
model needs. Each op builds a backward closure on a per-tensor tape;
``backward`` runs one reverse topological sweep and then drops the
closures so intermediate storage is reclaimed even while the outputs
stay referenced. Wrap inference code in ``no_grad()`` to skip taping.
"""

from __future__ import annotations

from contextlib import contextmanager

import numpy as np

_grad_enabled = True


@contextmanager
def no_grad():
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
    __slots__ = ("data", "grad", "_parents", "_backward", "__weakref__")

    def __init__(self, data, parents=(), backward=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        if _grad_enabled:
            self._parents = parents
            self._backward = backward
        else:
            self._parents = ()
            self._backward = None

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Tensor(shape={self.data.shape})"

    def _accum(self, g):
        if self.grad is None:
            self.grad = g.copy() if isinstance(g, np.ndarray) else np.asarray(g)
        else:
            self.grad += g

    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __sub__(self, other):
        return add(self, mul_const(other, -1.0))

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return mul_const(self, -1.0)

    def item(self) -> float:
        return float(self.data)

    def backward(self):
        """Reverse sweep from a scalar; accumulates into ``grad`` of every
        reachable tensor, then releases the tape."""
        if self.data.size != 1:
            raise ValueError("backward requires a scalar loss")
        order: list[Tensor] = []
        seen = {id(self)}
        stack: list[tuple[Tensor, int]] = [(self, 0)]
        while stack:
            node, i = stack.pop()
            if i < len(node._parents or ()):
                stack.append((node, i + 1))
                child = node._parents[i]
                if id(child) not in seen:
                    seen.add(id(child))
                    stack.append((child, 0))
            else:
                order.append(node)
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
        # Sever the graph so intermediates are collectable.
        for node in order:
            node._parents = ()
            node._backward = None


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum gradient over axes that were broadcast in the forward op."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _wrap(out, parents, backward):
    if not _grad_enabled:
        return Tensor(out)
    return Tensor(out, parents=parents, backward=backward)


def constant(data) -> Tensor:
    """A leaf with no gradient path (embedding of fixed data)."""
    return Tensor(data)


def add(a: Tensor, b: Tensor) -> Tensor:
    out = a.data + b.data

    def bwd(g):
        a._accum(_unbroadcast(g, a.data.shape))
        b._accum(_unbroadcast(g, b.data.shape))

    return _wrap(out, (a, b), bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = a.data * b.data

    def bwd(g):
        a._accum(_unbroadcast(g * b.data, a.data.shape))
        b._accum(_unbroadcast(g * a.data, b.data.shape))

    return _wrap(out, (a, b), bwd)


def add_const(a: Tensor, c) -> Tensor:
    out = a.data + c

    def bwd(g):
        a._accum(_unbroadcast(g, a.data.shape))

    return _wrap(out, (a,), bwd)


def mul_const(a: Tensor, c) -> Tensor:
    out = a.data * c

    def bwd(g):
        a._accum(_unbroadcast(g * c, a.data.shape))

    return _wrap(out, (a,), bwd)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """2-D or batched 3-D matrix product."""
    out = a.data @ b.data

    def bwd(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        a._accum(_unbroadcast(ga, a.data.shape))
        b._accum(_unbroadcast(gb, b.data.shape))

    return _wrap(out, (a, b), bwd)


def const_matmul(c: np.ndarray, b: Tensor) -> Tensor:
    """Matrix product with a constant left factor (no gradient to c)."""
    out = c @ b.data

    def bwd(g):
        b._accum(np.swapaxes(c, -1, -2) @ g)

    return _wrap(out, (b,), bwd)


def transpose(a: Tensor, axes: tuple) -> Tensor:
    out = np.transpose(a.data, axes)
    inv = tuple(np.argsort(axes))

    def bwd(g):
        a._accum(np.transpose(g, inv))

    return _wrap(out, (a,), bwd)


def reshape(a: Tensor, shape: tuple) -> Tensor:
    out = a.data.reshape(shape)
    orig = a.data.shape

    def bwd(g):
        a._accum(g.reshape(orig))

    return _wrap(out, (a,), bwd)


def concat(parts: list[Tensor], axis: int = 0) -> Tensor:
    out = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.data.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        for p, piece in zip(parts, np.split(g, splits, axis=axis)):
            p._accum(piece)

    return _wrap(out, tuple(parts), bwd)


def tensor_sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bwd(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        a._accum(np.broadcast_to(g, a.data.shape))

    return _wrap(out, (a,), bwd)


def tensor_mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    denom = a.data.size if axis is None else a.data.shape[axis]
    return mul_const(tensor_sum(a, axis=axis, keepdims=keepdims), 1.0 / denom)


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)

    def bwd(g):
        a._accum(g * (1.0 - out * out))

    return _wrap(out, (a,), bwd)


def relu(a: Tensor) -> Tensor:
    out = np.maximum(a.data, 0.0)

    def bwd(g):
        a._accum(g * (a.data > 0.0))

    return _wrap(out, (a,), bwd)


def leaky_relu(a: Tensor, slope: float = 0.2) -> Tensor:
    pos = a.data > 0.0
    out = np.where(pos, a.data, slope * a.data)

    def bwd(g):
        a._accum(g * np.where(pos, 1.0, slope))

    return _wrap(out, (a,), bwd)


def elu(a: Tensor, alpha: float = 1.0) -> Tensor:
    pos = a.data > 0.0
    expm = alpha * (np.exp(np.minimum(a.data, 0.0)) - 1.0)
    out = np.where(pos, a.data, expm)

    def bwd(g):
        a._accum(g * np.where(pos, 1.0, expm + alpha))

    return _wrap(out, (a,), bwd)


def sigmoid(a: Tensor) -> Tensor:
    out = 1.0 / (1.0 + np.exp(-a.data))

    def bwd(g):
        a._accum(g * out * (1.0 - out))

    return _wrap(out, (a,), bwd)


def glu(a: Tensor) -> Tensor:
    """Gated linear unit over the last axis: split in half, content * sigmoid(gate).

    The multiplicative gate is what lets a node suppress or pass its own
    content based on computed relevance features.
    """
    d = a.data.shape[-1]
    if d % 2 != 0:
        raise ValueError("glu requires an even last dimension")
    half = d // 2
    content = a.data[..., :half]
    gate = 1.0 / (1.0 + np.exp(-a.data[..., half:]))
    out = content * gate

    def bwd(g):
        ga = np.empty_like(a.data)
        ga[..., :half] = g * gate
        ga[..., half:] = g * content * gate * (1.0 - gate)
        a._accum(ga)

    return _wrap(out, (a,), bwd)


def softmax(a: Tensor) -> Tensor:
    """Softmax over the last axis, numerically stabilized."""
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)

    def bwd(g):
        inner = (g * out).sum(axis=-1, keepdims=True)
        a._accum((g - inner) * out)

    return _wrap(out, (a,), bwd)


def gather_rows(table: Tensor, idx: np.ndarray) -> Tensor:
    """Row lookup ``table[idx]`` with scatter-add backward (embeddings)."""
    idx = np.asarray(idx, dtype=np.int64)
    out = table.data[idx]

    def bwd(g):
        if table.grad is None:
            table.grad = np.zeros_like(table.data)
        np.add.at(table.grad, idx, g)

    return _wrap(out, (table,), bwd)


def softmax_cross_entropy(logits: Tensor, label: int) -> Tensor:
    """-log softmax(logits)[label] for a 1-D logit vector."""
    x = logits.data
    if x.ndim != 1:
        raise ValueError("logits must be 1-D")
    if not 0 <= label < x.shape[0]:
        raise ValueError(f"label {label} out of range for {x.shape[0]} classes")
    shifted = x - x.max()
    logsumexp = np.log(np.exp(shifted).sum())
    probs = np.exp(shifted - logsumexp)
    out = logsumexp - shifted[label]

    def bwd(g):
        gx = probs * g
        gx[label] -= g
        logits._accum(gx)

    return _wrap(out, (logits,), bwd)


def finite_difference_grad(f, x: np.ndarray, step: float = 1e-4) -> np.ndarray:
    """Central finite differences of a scalar function; test oracle."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        hi = f(x)
        flat[i] = orig - step
        lo = f(x)
        flat[i] = orig
        gf[i] = (hi - lo) / (2.0 * step)
    return g
