"""Minimal reverse-mode automatic differentiation over numpy arrays.

A :class:`Tensor` wraps a float64 ndarray plus an optional gradient and a
closure that propagates incoming gradients to its parents.  The op set is
exactly what the denoiser needs: broadcast arithmetic, (batched) matmul,
shape moves, gather/scatter for convolution patches and bilinear corners,
and fused nonlinearities whose backward formulas are written out by hand.

Each tensor carries a transitive ``needs`` flag (does any ancestor require
gradients); backward closures skip parents that do not, so constant
subgraphs such as the input image cost nothing on the way back.  Gradients
accumulate in 64-bit and ``backward`` walks the tape in reverse topological
order, so a node's gradient is complete before it is pushed on.
"""

from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np
from numpy.typing import NDArray

Array = NDArray[np.float64]


def _unbroadcast(grad: Array, shape: tuple[int, ...]) -> Array:
    """Sum a broadcast gradient back down to the original shape."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "needs", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False,
                 _parents: Sequence["Tensor"] = (),
                 _backward: Optional[Callable[[Array], None]] = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: Optional[Array] = None
        self.requires_grad = bool(requires_grad)
        self._parents = tuple(_parents)
        self._backward = _backward
        self.needs = self.requires_grad or any(p.needs for p in self._parents)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def _accumulate(self, grad: Array) -> None:
        # handlers unbroadcast first, so grad always matches data's shape
        if self.grad is None:
            self.grad = np.array(grad, dtype=np.float64)
        else:
            self.grad += grad

    def backward(self) -> None:
        if self.data.size != 1:
            raise ValueError("backward requires a scalar loss")
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.needs:
                    stack.append((parent, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # --- arithmetic ---

    def __add__(self, other: "Tensor") -> "Tensor":
        out = Tensor(self.data + other.data, _parents=(self, other))

        def back(g: Array) -> None:
            if self.needs:
                self._accumulate(_unbroadcast(g, self.data.shape))
            if other.needs:
                other._accumulate(_unbroadcast(g, other.data.shape))
        out._backward = back
        return out

    def __mul__(self, other: "Tensor") -> "Tensor":
        out = Tensor(self.data * other.data, _parents=(self, other))

        def back(g: Array) -> None:
            if self.needs:
                self._accumulate(_unbroadcast(g * other.data, self.data.shape))
            if other.needs:
                other._accumulate(_unbroadcast(g * self.data, other.data.shape))
        out._backward = back
        return out

    def __sub__(self, other: "Tensor") -> "Tensor":
        return self + other.scale(-1.0)

    def scale(self, s: float) -> "Tensor":
        out = Tensor(self.data * s, _parents=(self,))

        def back(g: Array) -> None:
            if self.needs:
                self._accumulate(g * s)
        out._backward = back
        return out

    def __matmul__(self, other: "Tensor") -> "Tensor":
        if self.data.ndim < 2 or other.data.ndim < 2:
            raise ValueError("matmul operands must have ndim >= 2")
        out = Tensor(self.data @ other.data, _parents=(self, other))

        def back(g: Array) -> None:
            if self.needs:
                self._accumulate(_unbroadcast(g @ other.data.swapaxes(-1, -2),
                                              self.data.shape))
            if other.needs:
                other._accumulate(_unbroadcast(self.data.swapaxes(-1, -2) @ g,
                                               other.data.shape))
        out._backward = back
        return out

    # --- shape moves ---

    def reshape(self, *shape: int) -> "Tensor":
        out = Tensor(self.data.reshape(shape), _parents=(self,))

        def back(g: Array) -> None:
            if self.needs:
                self._accumulate(g.reshape(self.data.shape))
        out._backward = back
        return out

    def transpose(self, *axes: int) -> "Tensor":
        inverse = tuple(np.argsort(axes))
        out = Tensor(self.data.transpose(axes), _parents=(self,))

        def back(g: Array) -> None:
            if self.needs:
                self._accumulate(g.transpose(inverse))
        out._backward = back
        return out

    def slice_axis1(self, start: int, stop: int) -> "Tensor":
        """Token-axis slice of a (B, T, D) tensor."""
        out = Tensor(self.data[:, start:stop], _parents=(self,))

        def back(g: Array) -> None:
            if self.needs:
                full = np.zeros_like(self.data)
                full[:, start:stop] = g
                self._accumulate(full)
        out._backward = back
        return out

    def sum(self, axis: Optional[int] = None, keepdims: bool = False) -> "Tensor":
        out = Tensor(self.data.sum(axis=axis, keepdims=keepdims), _parents=(self,))

        def back(g: Array) -> None:
            if not self.needs:
                return
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            self._accumulate(np.broadcast_to(g, self.data.shape).copy())
        out._backward = back
        return out

    def mean(self) -> "Tensor":
        return self.sum().scale(1.0 / self.data.size)


def const(value) -> Tensor:
    return Tensor(value)


def parameter(value) -> Tensor:
    return Tensor(value, requires_grad=True)


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis),
                 _parents=tuple(tensors))
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def back(g: Array) -> None:
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if not t.needs:
                continue
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(lo, hi)
            t._accumulate(g[tuple(idx)])
    out._backward = back
    return out


def pad_hw(x: Tensor, pad: int) -> Tensor:
    """Zero-pad the two middle axes of a (B, H, W, C) tensor."""
    widths = ((0, 0), (pad, pad), (pad, pad), (0, 0))
    out = Tensor(np.pad(x.data, widths), _parents=(x,))

    def back(g: Array) -> None:
        if x.needs:
            x._accumulate(g[:, pad:-pad, pad:-pad, :])
    out._backward = back
    return out


def take_flat(x: Tensor, idx: NDArray[np.int64]) -> Tensor:
    """Gather from the flattened tensor; scatter-add on the way back."""
    flat = x.data.reshape(-1)
    out = Tensor(flat[idx], _parents=(x,))

    def back(g: Array) -> None:
        if x.needs:
            gx = np.bincount(idx.ravel(), weights=g.ravel(), minlength=flat.size)
            x._accumulate(gx.reshape(x.data.shape))
    out._backward = back
    return out


def take_rows(x: Tensor, idx: NDArray[np.int64]) -> Tensor:
    """Gather rows of a 2D tensor; ``idx`` may have any shape."""
    out = Tensor(x.data[idx], _parents=(x,))

    def back(g: Array) -> None:
        if x.needs:
            gx = np.zeros_like(x.data)
            np.add.at(gx, idx.reshape(-1), g.reshape(-1, x.data.shape[1]))
            x._accumulate(gx)
    out._backward = back
    return out


_GELU_C = float(np.sqrt(2.0 / np.pi))


def gelu(x: Tensor) -> Tensor:
    d = x.data
    sq = d * d
    u = np.tanh(_GELU_C * (d + 0.044715 * (sq * d)))
    out = Tensor(0.5 * d * (1.0 + u), _parents=(x,))

    def back(g: Array) -> None:
        if x.needs:
            du = (1.0 - u * u) * _GELU_C * (1.0 + 0.134145 * sq)
            x._accumulate(g * (0.5 * (1.0 + u) + 0.5 * d * du))
    out._backward = back
    return out


def relu(x: Tensor) -> Tensor:
    out = Tensor(np.maximum(x.data, 0.0), _parents=(x,))

    def back(g: Array) -> None:
        if x.needs:
            x._accumulate(np.where(x.data > 0.0, g, 0.0))
    out._backward = back
    return out


def softmax_last(x: Tensor) -> Tensor:
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=-1, keepdims=True)
    out = Tensor(s, _parents=(x,))

    def back(g: Array) -> None:
        if x.needs:
            dot = (g * s).sum(axis=-1, keepdims=True)
            x._accumulate(s * (g - dot))
    out._backward = back
    return out


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out = Tensor(gain.data * xhat + bias.data, _parents=(x, gain, bias))

    def back(g: Array) -> None:
        reduce_axes = tuple(range(g.ndim - 1))
        if gain.needs:
            gain._accumulate((g * xhat).sum(axis=reduce_axes))
        if bias.needs:
            bias._accumulate(g.sum(axis=reduce_axes))
        if x.needs:
            gh = g * gain.data
            term = gh - gh.mean(axis=-1, keepdims=True) \
                - xhat * (gh * xhat).mean(axis=-1, keepdims=True)
            x._accumulate(inv * term)
    out._backward = back
    return out
