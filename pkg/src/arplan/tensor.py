"""Minimal reverse-mode autodiff over dense float64 numpy arrays.

Every op records its parents and a backward closure; ``Tensor.backward()``
replays the graph in reverse topological order with a fixed child order, so
gradient accumulation is bit-reproducible run to run.
"""

from __future__ import annotations

import contextlib

import numpy as np


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (forward-only evaluation)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (reverses numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


class Tensor:
    """Dense n-d array of float64 with an optional gradient record."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None

    # -- construction -----------------------------------------------------

    @staticmethod
    def _lift(x) -> "Tensor":
        return x if isinstance(x, Tensor) else Tensor(x)

    @staticmethod
    def _result(data, parents, backward) -> "Tensor":
        out = Tensor(data)
        if _grad_enabled and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
        return out

    # -- introspection ----------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # -- arithmetic -------------------------------------------------------

    def __add__(self, other):
        other = Tensor._lift(other)
        data = self.data + other.data
        def backward(g, a=self, b=other):
            if a.requires_grad:
                a.grad += _unbroadcast(g, a.data.shape)
            if b.requires_grad:
                b.grad += _unbroadcast(g, b.data.shape)
        return Tensor._result(data, (self, other), backward)

    __radd__ = __add__

    def __neg__(self):
        def backward(g, a=self):
            if a.requires_grad:
                a.grad += -g
        return Tensor._result(-self.data, (self,), backward)

    def __sub__(self, other):
        other = Tensor._lift(other)
        data = self.data - other.data
        def backward(g, a=self, b=other):
            if a.requires_grad:
                a.grad += _unbroadcast(g, a.data.shape)
            if b.requires_grad:
                b.grad += _unbroadcast(-g, b.data.shape)
        return Tensor._result(data, (self, other), backward)

    def __rsub__(self, other):
        return Tensor._lift(other) - self

    def __mul__(self, other):
        other = Tensor._lift(other)
        data = self.data * other.data
        def backward(g, a=self, b=other):
            if a.requires_grad:
                a.grad += _unbroadcast(g * b.data, a.data.shape)
            if b.requires_grad:
                b.grad += _unbroadcast(g * a.data, b.data.shape)
        return Tensor._result(data, (self, other), backward)

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = Tensor._lift(other)
        data = self.data / other.data
        def backward(g, a=self, b=other):
            if a.requires_grad:
                a.grad += _unbroadcast(g / b.data, a.data.shape)
            if b.requires_grad:
                b.grad += _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape)
        return Tensor._result(data, (self, other), backward)

    def __rtruediv__(self, other):
        return Tensor._lift(other) / self

    def __pow__(self, p: float):
        data = self.data ** p
        def backward(g, a=self):
            if a.requires_grad:
                a.grad += g * p * a.data ** (p - 1)
        return Tensor._result(data, (self,), backward)

    def __matmul__(self, other):
        other = Tensor._lift(other)
        a, b = self.data, other.data
        if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
            raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
        data = a @ b
        def backward(g, A=self, B=other):
            if A.requires_grad:
                A.grad += _unbroadcast(g @ B.data.swapaxes(-1, -2), A.data.shape)
            if B.requires_grad:
                B.grad += _unbroadcast(A.data.swapaxes(-1, -2) @ g, B.data.shape)
        return Tensor._result(data, (self, other), backward)

    # -- elementwise functions --------------------------------------------

    def exp(self):
        data = np.exp(self.data)
        def backward(g, a=self, y=data):
            if a.requires_grad:
                a.grad += g * y
        return Tensor._result(data, (self,), backward)

    def log(self):
        data = np.log(self.data)
        def backward(g, a=self):
            if a.requires_grad:
                a.grad += g / a.data
        return Tensor._result(data, (self,), backward)

    def sqrt(self):
        data = np.sqrt(self.data)
        def backward(g, a=self, y=data):
            if a.requires_grad:
                a.grad += g * 0.5 / y
        return Tensor._result(data, (self,), backward)

    def tanh(self):
        data = np.tanh(self.data)
        def backward(g, a=self, y=data):
            if a.requires_grad:
                a.grad += g * (1.0 - y * y)
        return Tensor._result(data, (self,), backward)

    def sigmoid(self):
        data = 0.5 * (np.tanh(0.5 * self.data) + 1.0)
        def backward(g, a=self, y=data):
            if a.requires_grad:
                a.grad += g * y * (1.0 - y)
        return Tensor._result(data, (self,), backward)

    def relu(self):
        data = np.maximum(self.data, 0.0)
        def backward(g, a=self):
            if a.requires_grad:
                a.grad += g * (a.data > 0.0)
        return Tensor._result(data, (self,), backward)

    def softplus(self):
        # log(1 + e^x), stable form x+ + log1p(e^{-|x|})
        x = self.data
        data = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))
        def backward(g, a=self):
            if a.requires_grad:
                a.grad += g * (0.5 * (np.tanh(0.5 * a.data) + 1.0))
        return Tensor._result(data, (self,), backward)

    def abs_smooth(self, eps: float = 1e-12):
        """sqrt(x^2 + eps): differentiable magnitude surrogate."""
        data = np.sqrt(self.data * self.data + eps)
        def backward(g, a=self, y=data):
            if a.requires_grad:
                a.grad += g * a.data / y
        return Tensor._result(data, (self,), backward)

    # -- reductions -------------------------------------------------------

    def sum(self, axis=None, keepdims: bool = False):
        data = self.data.sum(axis=axis, keepdims=keepdims)
        def backward(g, a=self):
            if not a.requires_grad:
                return
            gg = g
            if axis is not None and not keepdims:
                gg = np.expand_dims(gg, axis)
            a.grad += np.broadcast_to(gg, a.data.shape)
        return Tensor._result(data, (self,), backward)

    def mean(self, axis=None, keepdims: bool = False):
        n = self.data.size if axis is None else np.prod(
            [self.data.shape[a] for a in np.atleast_1d(axis)])
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / float(n))

    def softmax(self, axis: int = -1):
        """Max-shifted softmax along ``axis``."""
        x = self.data
        shifted = x - x.max(axis=axis, keepdims=True)
        e = np.exp(shifted)
        data = e / e.sum(axis=axis, keepdims=True)
        def backward(g, a=self, y=data):
            if a.requires_grad:
                a.grad += y * (g - (g * y).sum(axis=axis, keepdims=True))
        return Tensor._result(data, (self,), backward)

    # -- shape manipulation -----------------------------------------------

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        data = self.data.reshape(shape)
        def backward(g, a=self):
            if a.requires_grad:
                a.grad += g.reshape(a.data.shape)
        return Tensor._result(data, (self,), backward)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        data = self.data.transpose(axes) if axes else self.data.T
        inv = np.argsort(axes) if axes else None
        def backward(g, a=self):
            if a.requires_grad:
                a.grad += g.transpose(inv) if inv is not None else g.T
        return Tensor._result(data, (self,), backward)

    def swapaxes(self, a1: int, a2: int):
        data = self.data.swapaxes(a1, a2)
        def backward(g, a=self):
            if a.requires_grad:
                a.grad += g.swapaxes(a1, a2)
        return Tensor._result(data, (self,), backward)

    def __getitem__(self, idx):
        data = self.data[idx]
        def backward(g, a=self):
            if a.requires_grad:
                np.add.at(a.grad, idx, g)
        return Tensor._result(data, (self,), backward)

    def take_rows(self, indices):
        """Gather rows along axis 0; backward scatter-adds."""
        indices = np.asarray(indices)
        return self[indices]

    # -- graph ------------------------------------------------------------

    def backward(self):
        """Reverse-mode accumulation from a scalar output."""
        if self.data.size != 1:
            raise ValueError(f"backward requires a scalar loss, got shape {self.shape}")
        topo = []
        visited = set()
        stack = [(self, False)]
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
        for node in topo:
            if node.requires_grad and node.grad is None:
                node.grad = np.zeros_like(node.data)
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None:
                node._backward(node.grad)

    def zero_grad(self):
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [Tensor._lift(t) for t in tensors]
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)
    def backward(g, ts=tensors):
        for t, lo, hi in zip(ts, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(lo, hi)
                t.grad += g[tuple(sl)]
    return Tensor._result(data, tensors, backward)


def stack(tensors, axis: int = 0) -> Tensor:
    tensors = [Tensor._lift(t) for t in tensors]
    data = np.stack([t.data for t in tensors], axis=axis)
    def backward(g, ts=tensors):
        parts = np.moveaxis(g, axis, 0)
        for t, gp in zip(ts, parts):
            if t.requires_grad:
                t.grad += gp
    return Tensor._result(data, tensors, backward)


def conv2d(x: Tensor, w: Tensor, b: Tensor, stride: int = 1) -> Tensor:
    """2D convolution, x: [B,Cin,H,W], w: [Cout,Cin,kh,kw], b: [Cout].

    'Same'-style zero padding of (k-1)//2; backward via col2im scatter.
    """
    B, Cin, H, W = x.shape
    Cout, Cin2, kh, kw = w.shape
    if Cin != Cin2:
        raise ShapeError(f"conv2d channel mismatch: {x.shape} vs {w.shape}")
    ph, pw = (kh - 1) // 2, (kw - 1) // 2
    Ho = (H + 2 * ph - kh) // stride + 1
    Wo = (W + 2 * pw - kw) // stride + 1
    xp = np.pad(x.data, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    # im2col index grids
    i0 = stride * np.arange(Ho)[:, None] + np.arange(kh)[None, :]
    j0 = stride * np.arange(Wo)[:, None] + np.arange(kw)[None, :]
    cols = xp[:, :, i0[:, None, :, None], j0[None, :, None, :]]
    # cols: [B, Cin, Ho, Wo, kh, kw] -> [B, Ho, Wo, Cin*kh*kw]
    cols = cols.transpose(0, 2, 3, 1, 4, 5).reshape(B, Ho, Wo, Cin * kh * kw)
    wmat = w.data.reshape(Cout, Cin * kh * kw)
    out = cols @ wmat.T + b.data

    def backward(g, X=x, Wt=w, Bt=b):
        gcols = g @ wmat  # [B, Ho, Wo, Cin*kh*kw]
        if Wt.requires_grad:
            Wt.grad += (g.reshape(-1, Cout).T @ cols.reshape(-1, Cin * kh * kw)
                        ).reshape(Wt.data.shape)
        if Bt.requires_grad:
            Bt.grad += g.sum(axis=(0, 1, 2))
        if X.requires_grad:
            gx = np.zeros_like(xp)
            gc = gcols.reshape(B, Ho, Wo, Cin, kh, kw).transpose(0, 3, 1, 2, 4, 5)
            np.add.at(gx, (slice(None), slice(None),
                           i0[:, None, :, None], j0[None, :, None, :]), gc)
            X.grad += gx[:, :, ph:ph + H, pw:pw + W]

    out_t = Tensor._result(out.transpose(0, 3, 1, 2), (x, w, b), None)
    # forward stored channel-last for the matmul; transpose back to [B,Cout,Ho,Wo]
    if out_t.requires_grad:
        def backward_chfirst(g):
            backward(g.transpose(0, 2, 3, 1))
        out_t._backward = backward_chfirst
    return out_t
