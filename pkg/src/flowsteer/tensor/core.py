"""Minimal dense tensor with reverse-mode autodiff, backed by numpy.

Single global floating-point precision (default float32; tests switch to
float64 for tight finite-difference checks). Tensors are immutable values
after construction; gradient accumulation happens inside a single backward
pass on one thread.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

_DEFAULT_DTYPE = np.float32


def set_default_dtype(dtype) -> None:
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype)
    if dtype not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ValueError(f"unsupported dtype {dtype}")
    _DEFAULT_DTYPE = dtype.type


def default_dtype():
    return _DEFAULT_DTYPE


@contextlib.contextmanager
def precision(dtype):
    """Temporarily switch the global precision (used by gradient-check tests)."""
    old = _DEFAULT_DTYPE
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(old)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum gradient over axes that were broadcast in the forward op."""
    if grad.shape == shape:
        return grad
    ndim_diff = grad.ndim - len(shape)
    if ndim_diff > 0:
        grad = grad.sum(axis=tuple(range(ndim_diff)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    """Dense multi-dimensional array node in a reverse-mode autodiff tape."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.asarray(data, dtype=_DEFAULT_DTYPE)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self.name = name

    # -- construction helpers -------------------------------------------------

    @staticmethod
    def _make(data: np.ndarray, parents: Sequence["Tensor"],
              backward: Callable[[np.ndarray], None]) -> "Tensor":
        out = Tensor.__new__(Tensor)
        out.data = data
        out.requires_grad = any(p.requires_grad for p in parents)
        out.grad = None
        out.name = None
        if out.requires_grad:
            out._parents = tuple(parents)
            out._backward = backward
        else:
            out._parents = ()
            out._backward = None
        return out

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # -- autodiff -------------------------------------------------------------

    def detach(self) -> "Tensor":
        """Forward identity whose backward contribution is exactly zero."""
        return Tensor(self.data)

    def backward(self) -> None:
        if self.data.shape != ():
            raise ValueError("backward() requires a scalar loss")
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
                if p.requires_grad and id(p) not in visited:
                    stack.append((p, False))
        self.grad = np.ones((), dtype=self.data.dtype)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
                # free intermediate grads eagerly; leaves keep theirs
                if node is not self and node.name is None:
                    node.grad = None

    def _accum(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = g.astype(self.data.dtype, copy=True)
        else:
            self.grad = self.grad + g

    # -- elementwise ----------------------------------------------------------

    def __add__(self, other):
        other = _as_tensor(other)
        data = self.data + other.data

        def bwd(g):
            if self.requires_grad:
                self._accum(_unbroadcast(g, self.data.shape))
            if other.requires_grad:
                other._accum(_unbroadcast(g, other.data.shape))

        return Tensor._make(data, (self, other), bwd)

    __radd__ = __add__

    def __neg__(self):
        def bwd(g):
            self._accum(-g)
        return Tensor._make(-self.data, (self,), bwd)

    def __sub__(self, other):
        return self + (-_as_tensor(other))

    def __rsub__(self, other):
        return _as_tensor(other) + (-self)

    def __mul__(self, other):
        other = _as_tensor(other)
        data = self.data * other.data

        def bwd(g):
            if self.requires_grad:
                self._accum(_unbroadcast(g * other.data, self.data.shape))
            if other.requires_grad:
                other._accum(_unbroadcast(g * self.data, other.data.shape))

        return Tensor._make(data, (self, other), bwd)

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = _as_tensor(other)
        data = self.data / other.data

        def bwd(g):
            if self.requires_grad:
                self._accum(_unbroadcast(g / other.data, self.data.shape))
            if other.requires_grad:
                other._accum(_unbroadcast(-g * self.data / (other.data ** 2),
                                          other.data.shape))

        return Tensor._make(data, (self, other), bwd)

    def __rtruediv__(self, other):
        return _as_tensor(other) / self

    def __pow__(self, p: float):
        data = self.data ** p

        def bwd(g):
            self._accum(g * p * self.data ** (p - 1))

        return Tensor._make(data, (self,), bwd)

    def exp(self):
        data = np.exp(self.data)

        def bwd(g):
            self._accum(g * data)

        return Tensor._make(data, (self,), bwd)

    def log(self):
        def bwd(g):
            self._accum(g / self.data)
        return Tensor._make(np.log(self.data), (self,), bwd)

    def tanh(self):
        data = np.tanh(self.data)

        def bwd(g):
            self._accum(g * (1.0 - data ** 2))

        return Tensor._make(data, (self,), bwd)

    def silu(self):
        sig = 1.0 / (1.0 + np.exp(-self.data))
        data = self.data * sig

        def bwd(g):
            self._accum(g * (sig * (1.0 + self.data * (1.0 - sig))))

        return Tensor._make(data, (self,), bwd)

    def relu(self):
        mask = self.data > 0
        def bwd(g):
            self._accum(g * mask)
        return Tensor._make(self.data * mask, (self,), bwd)

    # -- reductions -----------------------------------------------------------

    def sum(self, axis=None, keepdims: bool = False):
        data = self.data.sum(axis=axis, keepdims=keepdims)

        def bwd(g):
            gg = g
            if axis is not None and not keepdims:
                gg = np.expand_dims(gg, axis)
            self._accum(np.broadcast_to(gg, self.data.shape))

        return Tensor._make(data, (self,), bwd)

    def mean(self, axis=None, keepdims: bool = False):
        n = self.data.size if axis is None else np.prod(
            [self.data.shape[a] for a in (axis if isinstance(axis, tuple) else (axis,))])
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / float(n))

    # -- shape ops ------------------------------------------------------------

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        old = self.data.shape
        data = self.data.reshape(shape)

        def bwd(g):
            self._accum(g.reshape(old))

        return Tensor._make(data, (self,), bwd)

    def transpose(self, *axes):
        if not axes:
            axes = tuple(reversed(range(self.data.ndim)))
        elif len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        inv = np.argsort(axes)
        data = self.data.transpose(axes)

        def bwd(g):
            self._accum(g.transpose(inv))

        return Tensor._make(data, (self,), bwd)

    def swapaxes(self, a: int, b: int):
        axes = list(range(self.data.ndim))
        axes[a], axes[b] = axes[b], axes[a]
        return self.transpose(*axes)

    def __getitem__(self, idx):
        data = self.data[idx]

        def bwd(g):
            full = np.zeros_like(self.data)
            np.add.at(full, idx, g)
            self._accum(full)

        return Tensor._make(data, (self,), bwd)

    # -- linear algebra -------------------------------------------------------

    def matmul(self, other: "Tensor"):
        other = _as_tensor(other)
        a, b = self.data, other.data
        data = np.matmul(a, b)

        def bwd(g):
            if self.requires_grad:
                gb = np.matmul(g, np.swapaxes(b, -1, -2)) if b.ndim > 1 else \
                    np.multiply.outer(g, b) if a.ndim > 1 else g * b
                self._accum(_unbroadcast(gb, a.shape))
            if other.requires_grad:
                ga = np.matmul(np.swapaxes(a, -1, -2), g) if a.ndim > 1 else \
                    np.multiply.outer(a, g)
                other._accum(_unbroadcast(ga, b.shape))

        return Tensor._make(data, (self, other), bwd)

    __matmul__ = matmul


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=_DEFAULT_DTYPE))


# -- free functions ------------------------------------------------------------

def stop_gradient(x: Tensor) -> Tensor:
    """Forward identity; blocks every gradient flowing through this edge."""
    return x.detach()


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(lo, hi)
                t._accum(g[tuple(sl)])

    return Tensor._make(data, tensors, bwd)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    expanded = []
    for t in tensors:
        t = _as_tensor(t)
        shape = list(t.data.shape)
        shape.insert(axis if axis >= 0 else t.data.ndim + 1 + axis, 1)
        expanded.append(t.reshape(*shape))
    return concat(expanded, axis=axis)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        dot = (g * data).sum(axis=axis, keepdims=True)
        x._accum(data * (g - dot))

    return Tensor._make(data, (x,), bwd)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    data = shifted - lse
    sm = np.exp(data)

    def bwd(g):
        x._accum(g - sm * g.sum(axis=axis, keepdims=True))

    return Tensor._make(data, (x,), bwd)


def rms_norm(x: Tensor, scale: Tensor, eps: float = 1e-6) -> Tensor:
    """RMS normalization over the last axis with a learned scale vector."""
    inv = (x * x).mean(axis=-1, keepdims=True)
    inv = (inv + eps) ** -0.5
    return x * inv * scale


def adaptive_rms_norm(x: Tensor, scale: Tensor, shift: Tensor,
                      eps: float = 1e-6) -> Tensor:
    """RMSNorm whose scale/shift come from a conditioning vector.

    `scale` and `shift` broadcast against x's last axis; scale is applied
    as (1 + scale) so a zero conditioning vector is the identity modulation.
    """
    inv = (x * x).mean(axis=-1, keepdims=True)
    inv = (inv + eps) ** -0.5
    return x * inv * (1.0 + scale) + shift


def embedding(weight: Tensor, indices: np.ndarray) -> Tensor:
    indices = np.asarray(indices, dtype=np.int64)
    data = weight.data[indices]

    def bwd(g):
        full = np.zeros_like(weight.data)
        np.add.at(full, indices.reshape(-1),
                  g.reshape(-1, weight.data.shape[-1]))
        weight._accum(full)

    return Tensor._make(data, (weight,), bwd)


def masked_attention(q: Tensor, k: Tensor, v: Tensor,
                     mask: np.ndarray | None = None) -> Tensor:
    """Scaled dot-product attention; mask True = may attend.

    q: (..., Lq, d), k/v: (..., Lk, d); mask broadcasts to (..., Lq, Lk).
    """
    d = q.shape[-1]
    scores = q.matmul(k.swapaxes(-1, -2)) * (1.0 / np.sqrt(d))
    if mask is not None:
        bias = np.where(mask, 0.0, np.finfo(scores.data.dtype).min / 4)
        scores = scores + bias.astype(scores.data.dtype)
    return softmax(scores, axis=-1).matmul(v)


def cross_entropy(logits: Tensor, targets: np.ndarray,
                  weights=None) -> Tensor:
    """Mean cross-entropy; logits (..., C), integer targets (...).

    Optional per-target weights rescale each term; the result is the
    weighted mean (weights normalized by their sum).
    """
    logp = log_softmax(logits, axis=-1)
    flat = logp.reshape(-1, logits.shape[-1])
    idx = np.asarray(targets, dtype=np.int64).reshape(-1)
    picked = flat[np.arange(idx.size), idx]
    if weights is None:
        return -picked.mean()
    w = np.asarray(weights, dtype=logits.data.dtype).reshape(-1)
    if w.shape != picked.shape:
        raise ValueError("weights must match the number of targets")
    return -(picked * Tensor(w)).sum() * (1.0 / max(float(w.sum()), 1e-12))


def mse(pred: Tensor, target, weights=None) -> Tensor:
    diff = pred - _as_tensor(target)
    sq = diff * diff
    if weights is not None:
        w = np.asarray(weights, dtype=pred.data.dtype)
        total = sq * Tensor(w)
        denom = max(float(w.sum()) * (pred.data.size / w.size), 1.0)
        return total.sum() * (1.0 / denom)
    return sq.mean()
