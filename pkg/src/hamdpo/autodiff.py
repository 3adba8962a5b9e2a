"""Tape-free reverse-mode differentiation over numpy arrays.

Each ``Tensor`` remembers its parents and a closure that pushes its gradient
back to them; ``Tensor.backward`` walks the graph in reverse topological order.
Only the operations needed by the policy/critic losses are provided.
"""
from __future__ import annotations

import numpy as np


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def as_tensor(x) -> "Tensor":
    return x if isinstance(x, Tensor) else Tensor(x)


class Tensor:
    __array_priority__ = 100  # make ndarray <op> Tensor defer to Tensor

    def __init__(self, data, parents=(), backward=None, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self._parents = parents
        self._backward = backward
        self.requires_grad = requires_grad or any(p.requires_grad for p in parents)

    def __repr__(self):
        return f"Tensor({self.data!r})"

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def _accumulate(self, g):
        self.grad = g if self.grad is None else self.grad + g

    def backward(self, grad=None):
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without a seed needs a scalar output")
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
            stack.extend((p, False) for p in node._parents if p.requires_grad)
        self._accumulate(np.asarray(grad, dtype=np.float64))
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # -- elementwise arithmetic -------------------------------------------

    def __add__(self, other):
        other = as_tensor(other)

        def bw(g):
            if self.requires_grad:
                self._accumulate(_unbroadcast(g, self.shape))
            if other.requires_grad:
                other._accumulate(_unbroadcast(g, other.shape))

        return Tensor(self.data + other.data, (self, other), bw)

    __radd__ = __add__

    def __neg__(self):
        return Tensor(-self.data, (self,), lambda g: self._accumulate(-g))

    def __sub__(self, other):
        return self + (-as_tensor(other))

    def __rsub__(self, other):
        return as_tensor(other) + (-self)

    def __mul__(self, other):
        other = as_tensor(other)

        def bw(g):
            if self.requires_grad:
                self._accumulate(_unbroadcast(g * other.data, self.shape))
            if other.requires_grad:
                other._accumulate(_unbroadcast(g * self.data, other.shape))

        return Tensor(self.data * other.data, (self, other), bw)

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = as_tensor(other)

        def bw(g):
            if self.requires_grad:
                self._accumulate(_unbroadcast(g / other.data, self.shape))
            if other.requires_grad:
                other._accumulate(_unbroadcast(-g * self.data / other.data**2, other.shape))

        return Tensor(self.data / other.data, (self, other), bw)

    def __rtruediv__(self, other):
        return as_tensor(other) / self

    def __pow__(self, p: float):
        return Tensor(
            self.data**p, (self,), lambda g: self._accumulate(g * p * self.data ** (p - 1))
        )

    def __matmul__(self, other):
        other = as_tensor(other)
        if self.ndim != 2 or other.ndim != 2:
            raise ValueError("matmul supports 2-D operands only")

        def bw(g):
            if self.requires_grad:
                self._accumulate(g @ other.data.T)
            if other.requires_grad:
                other._accumulate(self.data.T @ g)

        return Tensor(self.data @ other.data, (self, other), bw)

    # -- reductions and shape ---------------------------------------------

    def sum(self, axis=None, keepdims=False):
        def bw(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            self._accumulate(np.broadcast_to(g, self.shape).copy())

        return Tensor(self.data.sum(axis=axis, keepdims=keepdims), (self,), bw)

    def mean(self, axis=None, keepdims=False):
        n = self.data.size if axis is None else np.prod(np.array(self.shape)[np.atleast_1d(axis)])
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    def reshape(self, *shape):
        return Tensor(
            self.data.reshape(*shape), (self,), lambda g: self._accumulate(g.reshape(self.shape))
        )

    def __getitem__(self, idx):
        def bw(g):
            full = np.zeros_like(self.data)
            np.add.at(full, idx, g)
            self._accumulate(full)

        return Tensor(self.data[idx], (self,), bw)

    def take_last(self, index: np.ndarray):
        """``out[..., 0] = self[..., index]`` picked per leading row."""
        index = np.asarray(index, dtype=np.int64)[..., None]

        def bw(g):
            full = np.zeros_like(self.data)
            np.put_along_axis(full, index, g[..., None], axis=-1)
            self._accumulate(full)

        return Tensor(np.take_along_axis(self.data, index, axis=-1)[..., 0], (self,), bw)

    # -- nonlinearities ---------------------------------------------------

    def exp(self):
        out = np.exp(self.data)
        return Tensor(out, (self,), lambda g: self._accumulate(g * out))

    def log(self):
        return Tensor(np.log(self.data), (self,), lambda g: self._accumulate(g / self.data))

    def tanh(self):
        out = np.tanh(self.data)
        return Tensor(out, (self,), lambda g: self._accumulate(g * (1.0 - out**2)))

    def clip(self, lo, hi):
        mask = (self.data >= lo) & (self.data <= hi)
        return Tensor(np.clip(self.data, lo, hi), (self,), lambda g: self._accumulate(g * mask))

    def log_softmax(self):
        shifted = self.data - self.data.max(axis=-1, keepdims=True)
        out = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))

        def bw(g):
            self._accumulate(g - np.exp(out) * g.sum(axis=-1, keepdims=True))

        return Tensor(out, (self,), bw)

    def softmax(self):
        return self.log_softmax().exp()


def minimum(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    pick_a = a.data <= b.data

    def bw(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * pick_a, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * ~pick_a, b.shape))

    return Tensor(np.minimum(a.data, b.data), (a, b), bw)


def parameters(arrays) -> list[Tensor]:
    return [Tensor(np.array(a, dtype=np.float64), requires_grad=True) for a in arrays]


def value_and_grad(fn, arrays):
    """Evaluate scalar ``fn(*tensors)`` and its gradient w.r.t. each array."""
    leaves = parameters(arrays)
    out = fn(*leaves)
    out.backward()
    grads = [np.zeros_like(l.data) if l.grad is None else l.grad for l in leaves]
    return out.item(), grads
