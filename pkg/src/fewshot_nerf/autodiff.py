"""A small reverse-mode autodiff over numpy arrays.

Only the operations needed by the radiance field, the renderer and the
losses are provided. Every op records its parents and a closure mapping the
output gradient to parent gradients; ``Tensor.backward`` walks the graph in
reverse topological order and accumulates into ``.grad``.
"""

from __future__ import annotations

import contextlib

import numpy as np

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (evaluation renders)."""
    global _GRAD_ENABLED
    prev, _GRAD_ENABLED = _GRAD_ENABLED, False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class GraphStateError(RuntimeError):
    """Backward requested on something without a recorded forward pass."""


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and grad.shape[i] != 1:
            grad = grad.sum(axis=i, keepdims=True)
    return grad


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, _parents=(), _backward=None, name=None):
        self.data = data if isinstance(data, np.ndarray) else np.asarray(data)
        self.requires_grad = requires_grad
        self.grad = None
        self._parents = _parents
        self._backward = _backward
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)

    # graph construction ---------------------------------------------------

    @staticmethod
    def _make(data, parents, backward):
        parents = tuple(p for p in parents if isinstance(p, Tensor))
        if not _GRAD_ENABLED or not any(p.requires_grad for p in parents):
            return Tensor(data)
        return Tensor(data, True, parents, backward)

    def backward(self, grad=None):
        if not self.requires_grad:
            raise GraphStateError("tensor has no recorded graph to differentiate")
        if grad is None:
            if self.data.size != 1:
                raise GraphStateError("backward without a seed gradient needs a scalar output")
            grad = np.ones_like(self.data)
        order, seen = [], set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        grads = {id(self): grad}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                # leaf: accumulate
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for p, pg in zip(node._parents, node._backward(g)):
                if pg is None or not p.requires_grad:
                    continue
                if id(p) in grads:
                    grads[id(p)] = grads[id(p)] + pg
                else:
                    grads[id(p)] = pg

    # arithmetic -------------------------------------------------------------

    def __add__(self, other):
        if not isinstance(other, Tensor):
            return Tensor._make(self.data + _const(other, self.dtype), (self,), lambda g: (g,))
        o = other
        a_shape, b_shape = self.shape, o.shape
        return Tensor._make(
            self.data + o.data,
            (self, o),
            lambda g: (_unbroadcast(g, a_shape), _unbroadcast(g, b_shape)),
        )

    __radd__ = __add__

    def __neg__(self):
        return Tensor._make(-self.data, (self,), lambda g: (-g,))

    def __sub__(self, other):
        return self + (-other if isinstance(other, Tensor) else -_const(other, self.dtype))

    def __rsub__(self, other):
        return (-self) + other

    def __mul__(self, other):
        if not isinstance(other, Tensor):
            c = _const(other, self.dtype)
            return Tensor._make(self.data * c, (self,), lambda g: (_unbroadcast(g * c, self.shape),))
        o = other
        a, b = self.data, o.data
        return Tensor._make(
            a * b,
            (self, o),
            lambda g: (_unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)),
        )

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return self * other.reciprocal()
        return self * (1.0 / _const(other, self.dtype))

    def reciprocal(self):
        out = 1.0 / self.data
        return Tensor._make(out, (self,), lambda g: (-g * out * out,))

    def __matmul__(self, other):
        a, b = self.data, other.data
        return Tensor._make(
            a @ b,
            (self, other),
            lambda g: (g @ b.T if self.requires_grad else None, a.T @ g if other.requires_grad else None),
        )

    def __getitem__(self, idx):
        shape = self.shape

        def bw(g):
            full = np.zeros(shape, dtype=g.dtype)
            if _needs_add_at(idx):
                np.add.at(full, idx, g)
            else:
                full[idx] = g
            return (full,)

        return Tensor._make(self.data[idx], (self,), bw)

    def reshape(self, *shape):
        old = self.shape
        return Tensor._make(self.data.reshape(*shape), (self,), lambda g: (g.reshape(old),))

    def sum(self, axis=None, keepdims=False):
        shape = self.shape

        def bw(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, shape).copy(),)

        return Tensor._make(self.data.sum(axis=axis, keepdims=keepdims), (self,), bw)

    def mean(self, axis=None, keepdims=False):
        n = self.data.size if axis is None else self.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    def cumsum_exclusive(self, axis=-1):
        """Exclusive cumulative sum: out[..., i] = sum_{j < i} x[..., j]."""
        x = np.moveaxis(self.data, axis, -1)
        # shifted cumsum rather than cumsum(x) - x: stays monotone for x >= 0 under rounding
        out = np.zeros_like(x)
        np.cumsum(x[..., :-1], axis=-1, out=out[..., 1:])
        out = np.moveaxis(out, -1, axis)

        def bw(g):
            # reverse exclusive cumsum
            rev = np.flip(np.cumsum(np.flip(g, axis=axis), axis=axis), axis=axis)
            return (rev - g,)

        return Tensor._make(out, (self,), bw)

    # elementwise nonlinearities ---------------------------------------------

    def exp(self):
        out = np.exp(self.data)
        return Tensor._make(out, (self,), lambda g: (g * out,))

    def sqrt(self):
        out = np.sqrt(self.data)
        return Tensor._make(out, (self,), lambda g: (g * 0.5 / out,))

    def relu(self):
        mask = self.data > 0
        return Tensor._make(np.maximum(self.data, 0), (self,), lambda g: (g * mask,))

    def softplus(self):
        x = self.data
        out = np.logaddexp(0.0, x).astype(x.dtype, copy=False)
        return Tensor._make(out, (self,), lambda g: (g * _sigmoid(x),))

    def sigmoid(self):
        out = _sigmoid(self.data)
        return Tensor._make(out, (self,), lambda g: (g * out * (1.0 - out),))

    def minimum(self, cap: float):
        mask = self.data < cap
        return Tensor._make(np.minimum(self.data, cap), (self,), lambda g: (g * mask,))


def _const(x, dtype):
    """Python scalars stay weakly typed; arrays are cast to the tensor dtype."""
    if isinstance(x, (int, float)):
        return x
    return np.asarray(x, dtype=dtype)


def _needs_add_at(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return any(isinstance(i, (np.ndarray, list)) for i in items)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def linear(x, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight + bias`` as one node; skips gradients nobody needs."""
    xt = x if isinstance(x, Tensor) else Tensor(x)
    a, w = xt.data, weight.data
    out = a @ w
    if bias is not None:
        out += bias.data

    def bw(g):
        g2 = g.reshape(-1, g.shape[-1])
        gx = g @ w.T if xt.requires_grad else None
        gw = a.reshape(-1, a.shape[-1]).T @ g2 if weight.requires_grad else None
        if bias is None:
            return gx, gw
        gb = np.ones(g2.shape[0], dtype=g2.dtype) @ g2 if bias.requires_grad else None
        return gx, gw, gb

    parents = (xt, weight) if bias is None else (xt, weight, bias)
    return Tensor._make(out, parents, bw)


def concat(tensors, axis=-1) -> Tensor:
    ts = [t if isinstance(t, Tensor) else Tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in ts]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=axis))

    return Tensor._make(np.concatenate([t.data for t in ts], axis=axis), tuple(ts), bw)


def stack_scalars(tensors) -> Tensor:
    return concat([t.reshape(1) for t in tensors], axis=0)
