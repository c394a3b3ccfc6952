"""Minimal reverse-mode automatic differentiation over numpy arrays.

A ``Tensor`` wraps an ndarray and records a backward closure per op; calling
``backward()`` walks the tape in reverse topological order. Only the ops the
denoiser and inverse-dynamics nets need are implemented. Dtype follows the
input arrays, so the same graph runs in float32 for training and float64 for
gradient checks.
"""

from __future__ import annotations

import contextlib
from typing import Iterable, Sequence

import numpy as np

from . import kernels

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


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum `grad` down to `shape` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None

    # -- construction helpers -------------------------------------------------
    @staticmethod
    def _make(data, parents, backward):
        out = Tensor(data)
        if _grad_enabled and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
        return out

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def _accum(self, g: np.ndarray):
        if self.grad is None:
            self.grad = g.astype(self.data.dtype, copy=True)
        else:
            self.grad += g

    def backward(self, grad: np.ndarray | None = None):
        if not self.requires_grad:
            raise ValueError("backward() on a tensor that does not require grad")
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        if grad is None:
            if self.data.size != 1:
                raise ValueError("implicit backward() needs a scalar output")
            grad = np.ones_like(self.data)
        self.grad = np.asarray(grad, dtype=self.data.dtype).reshape(self.data.shape).copy()
        for node in reversed(topo):
            if node._backward is not None:
                node._backward(node.grad)

    # -- arithmetic ------------------------------------------------------------
    # python scalars are kept raw so numpy's weak promotion preserves float32
    def __add__(self, other):
        if not isinstance(other, Tensor):

            def bwd_s(g):
                self._accum(g)

            return Tensor._make(self.data + other, (self,), bwd_s)
        out_data = self.data + other.data

        def bwd(g):
            if self.requires_grad:
                self._accum(_unbroadcast(g, self.data.shape))
            if other.requires_grad:
                other._accum(_unbroadcast(g, other.data.shape))

        return Tensor._make(out_data, (self, other), bwd)

    __radd__ = __add__

    def __neg__(self):
        def bwd(g):
            self._accum(-g)

        return Tensor._make(-self.data, (self,), bwd)

    def __sub__(self, other):
        if not isinstance(other, Tensor):
            return self.__add__(-other)
        out_data = self.data - other.data

        def bwd(g):
            if self.requires_grad:
                self._accum(_unbroadcast(g, self.data.shape))
            if other.requires_grad:
                other._accum(_unbroadcast(-g, other.data.shape))

        return Tensor._make(out_data, (self, other), bwd)

    def __rsub__(self, other):
        return (-self).__add__(other)

    def __mul__(self, other):
        if not isinstance(other, Tensor):
            return self.scale(other)
        out_data = self.data * other.data

        def bwd(g):
            if self.requires_grad:
                self._accum(_unbroadcast(g * other.data, self.data.shape))
            if other.requires_grad:
                other._accum(_unbroadcast(g * self.data, other.data.shape))

        return Tensor._make(out_data, (self, other), bwd)

    __rmul__ = __mul__

    def scale(self, c: float) -> "Tensor":
        def bwd(g):
            self._accum(g * c)

        return Tensor._make(self.data * c, (self,), bwd)

    def pow_const(self, p: float) -> "Tensor":
        out_data = self.data**p

        def bwd(g):
            self._accum(g * p * self.data ** (p - 1))

        return Tensor._make(out_data, (self,), bwd)

    def __matmul__(self, other):
        other = other if isinstance(other, Tensor) else Tensor(other)
        out_data = self.data @ other.data

        def bwd(g):
            if self.requires_grad:
                ga = g @ np.swapaxes(other.data, -1, -2)
                self._accum(_unbroadcast(ga, self.data.shape))
            if other.requires_grad:
                if self.data.ndim == 1:
                    gb = np.outer(self.data, g)
                else:
                    gb = np.swapaxes(self.data, -1, -2) @ g
                other._accum(_unbroadcast(gb, other.data.shape))

        return Tensor._make(out_data, (self, other), bwd)

    # -- shape ops ---------------------------------------------------------------
    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        old = self.data.shape

        def bwd(g):
            self._accum(g.reshape(old))

        return Tensor._make(self.data.reshape(shape), (self,), bwd)

    def transpose(self, *perm) -> "Tensor":
        if len(perm) == 1 and isinstance(perm[0], (tuple, list)):
            perm = tuple(perm[0])
        inv = np.argsort(perm)

        def bwd(g):
            self._accum(np.ascontiguousarray(g.transpose(inv)))

        return Tensor._make(np.ascontiguousarray(self.data.transpose(perm)), (self,), bwd)

    def select(self, axis: int, index: int) -> "Tensor":
        """Pick one slice along an axis (removes that axis)."""
        idx = [slice(None)] * self.data.ndim
        idx[axis] = index
        idx = tuple(idx)
        shape = self.data.shape

        def bwd(g):
            full = np.zeros(shape, dtype=g.dtype)
            full[idx] = g
            self._accum(full)

        return Tensor._make(np.ascontiguousarray(self.data[idx]), (self,), bwd)

    # -- reductions ----------------------------------------------------------------
    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        out_data = self.data.sum(axis=axis, keepdims=keepdims)
        shape = self.data.shape

        def bwd(g):
            gg = g
            if axis is not None and not keepdims:
                gg = np.expand_dims(gg, axis)
            self._accum(np.broadcast_to(gg, shape))

        return Tensor._make(out_data, (self,), bwd)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        if axis is None:
            n = self.data.size
        else:
            axes = axis if isinstance(axis, tuple) else (axis,)
            n = 1
            for a in axes:
                n *= self.data.shape[a]
        return self.sum(axis=axis, keepdims=keepdims).scale(1.0 / n)

    # -- nonlinearities ---------------------------------------------------------
    def silu(self) -> "Tensor":
        sig = 1.0 / (1.0 + np.exp(-self.data))
        out_data = self.data * sig

        def bwd(g):
            self._accum(g * sig * (1.0 + self.data * (1.0 - sig)))

        return Tensor._make(out_data, (self,), bwd)

    def softmax(self, axis: int = -1) -> "Tensor":
        shifted = self.data - self.data.max(axis=axis, keepdims=True)
        e = np.exp(shifted)
        out_data = e / e.sum(axis=axis, keepdims=True)

        def bwd(g):
            dot = (g * out_data).sum(axis=axis, keepdims=True)
            self._accum(out_data * (g - dot))

        return Tensor._make(out_data, (self,), bwd)


# -- free functions ---------------------------------------------------------------

def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        for t, a, b in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(a, b)
                t._accum(np.ascontiguousarray(g[tuple(idx)]))

    return Tensor._make(out_data, tuple(tensors), bwd)


def conv1d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, pad: int = 0) -> Tensor:
    """x (B, C_in, T) * w (C_out, C_in, k) -> (B, C_out, T_out)."""
    out_data = kernels.conv1d_forward(x.data, w.data, stride, pad)
    if b is not None:
        out_data += b.data[None, :, None]
    t_in = x.data.shape[2]
    k = w.data.shape[2]

    def bwd(g):
        g = np.ascontiguousarray(g)
        if x.requires_grad:
            x._accum(kernels.conv1d_backward_x(g, w.data, t_in, stride, pad))
        if w.requires_grad:
            w._accum(kernels.conv1d_backward_w(x.data, g, k, stride, pad))
        if b is not None and b.requires_grad:
            b._accum(g.sum(axis=(0, 2)))

    parents = (x, w) if b is None else (x, w, b)
    return Tensor._make(out_data, parents, bwd)


def upsample2(x: Tensor) -> Tensor:
    """Nearest-neighbour x2 along the last axis."""
    out_data = np.repeat(x.data, 2, axis=-1)

    def bwd(g):
        x._accum(g.reshape(*g.shape[:-1], -1, 2).sum(axis=-1))

    return Tensor._make(out_data, (x,), bwd)


def parameters(store: dict[str, Tensor]) -> Iterable[tuple[str, Tensor]]:
    return sorted(store.items())


def zero_grads(store: dict[str, Tensor]) -> None:
    for t in store.values():
        t.grad = None
