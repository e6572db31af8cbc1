"""Dense tensor engine with reverse-mode autodiff.

Define-by-run tape over numpy arrays. Training runs in float32; gradient
checks run the same ops in float64 (finite differences are meaningless at
float32 tolerances). The tape is a plain parent graph that is walked once
per backward() call and then dropped with the tensors themselves.
"""

from __future__ import annotations

import math
from collections import namedtuple
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.special import erf

__all__ = [
    "Tensor",
    "no_grad",
    "matmul",
    "softmax",
    "where_const",
    "relu",
    "rms_norm",
    "embedding",
    "gelu",
    "masked_cross_entropy",
    "CrossEntropyResult",
]

_GRAD_ENABLED = True


class no_grad:
    """Context manager that disables tape construction."""

    def __enter__(self):
        global _GRAD_ENABLED
        self._prev = _GRAD_ENABLED
        _GRAD_ENABLED = False
        return self

    def __exit__(self, *exc):
        global _GRAD_ENABLED
        _GRAD_ENABLED = self._prev
        return False


def _as_array(x, dtype=None) -> np.ndarray:
    if isinstance(x, Tensor):
        raise TypeError("expected raw array-like, got Tensor")
    a = np.asarray(x, dtype=dtype)
    if a.dtype == np.float64 and dtype is None:
        return a
    return a


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum grad down to `shape` after numpy broadcasting."""
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
    """A dense array plus optional gradient and tape linkage."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str = ""):
        self.data = np.asarray(data)
        if not np.issubdtype(self.data.dtype, np.floating):
            self.data = self.data.astype(np.float32)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self._parents: tuple = ()
        self._backward: Optional[Callable[[np.ndarray], None]] = None
        self.name = name

    # -- construction helpers -------------------------------------------------

    @staticmethod
    def param(data, name: str = "") -> "Tensor":
        return Tensor(data, requires_grad=True, name=name)

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, grad={'yes' if self.requires_grad else 'no'})"

    def zero_grad(self):
        self.grad = None

    # -- tape ------------------------------------------------------------------

    def _accumulate(self, g: np.ndarray):
        g = np.asarray(g, dtype=self.data.dtype)
        if self.grad is None:
            self.grad = np.array(g)
        else:
            self.grad = self.grad + g

    def backward(self, grad=None):
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without grad requires a scalar")
            grad = np.ones_like(self.data)
        # iterative topological order over the tape
        topo: list[Tensor] = []
        state: dict[int, int] = {}  # 0 absent, 1 pushed, 2 emitted
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                if state.get(id(node)) != 2:
                    state[id(node)] = 2
                    topo.append(node)
                continue
            if state.get(id(node)):
                continue
            state[id(node)] = 1
            stack.append((node, True))
            for p in node._parents:
                if not state.get(id(p)):
                    stack.append((p, False))
        self._accumulate(np.asarray(grad, dtype=self.data.dtype))
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
        # free the tape; grads stay on the leaves
        for node in topo:
            node._parents = ()
            node._backward = None

    # -- op plumbing -------------------------------------------------------------

    @staticmethod
    def _make(data: np.ndarray, parents: Sequence["Tensor"], backward) -> "Tensor":
        if not np.all(np.isfinite(data)):
            raise FloatingPointError("non-finite values produced by a forward op")
        out = Tensor(data)
        if _GRAD_ENABLED and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(p for p in parents if p.requires_grad)
            out._backward = backward
        return out

    @staticmethod
    def _lift(x, like: "Tensor") -> "Tensor":
        if isinstance(x, Tensor):
            return x
        return Tensor(np.asarray(x, dtype=like.data.dtype))

    # -- elementwise ops --------------------------------------------------------

    def __add__(self, other):
        other = Tensor._lift(other, self)
        data = self.data + other.data

        def bw(g):
            if self.requires_grad:
                self._accumulate(_unbroadcast(g, self.data.shape))
            if other.requires_grad:
                other._accumulate(_unbroadcast(g, other.data.shape))

        return Tensor._make(data, (self, other), bw)

    __radd__ = __add__

    def __neg__(self):
        data = -self.data

        def bw(g):
            self._accumulate(-g)

        return Tensor._make(data, (self,), bw)

    def __sub__(self, other):
        other = Tensor._lift(other, self)
        data = self.data - other.data

        def bw(g):
            if self.requires_grad:
                self._accumulate(_unbroadcast(g, self.data.shape))
            if other.requires_grad:
                other._accumulate(_unbroadcast(-g, other.data.shape))

        return Tensor._make(data, (self, other), bw)

    def __rsub__(self, other):
        return Tensor._lift(other, self) - self

    def __mul__(self, other):
        other = Tensor._lift(other, self)
        data = self.data * other.data

        def bw(g):
            if self.requires_grad:
                self._accumulate(_unbroadcast(g * other.data, self.data.shape))
            if other.requires_grad:
                other._accumulate(_unbroadcast(g * self.data, other.data.shape))

        return Tensor._make(data, (self, other), bw)

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = Tensor._lift(other, self)
        data = self.data / other.data

        def bw(g):
            if self.requires_grad:
                self._accumulate(_unbroadcast(g / other.data, self.data.shape))
            if other.requires_grad:
                other._accumulate(
                    _unbroadcast(-g * self.data / (other.data * other.data), other.data.shape)
                )

        return Tensor._make(data, (self, other), bw)

    # -- shape ops ----------------------------------------------------------------

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        old = self.data.shape
        data = self.data.reshape(shape)

        def bw(g):
            self._accumulate(g.reshape(old))

        return Tensor._make(data, (self,), bw)

    def swapaxes(self, a: int, b: int):
        data = np.swapaxes(self.data, a, b)

        def bw(g):
            self._accumulate(np.swapaxes(g, a, b))

        return Tensor._make(data, (self,), bw)

    # -- reductions ------------------------------------------------------------------

    def sum(self, axis=None, keepdims: bool = False):
        data = self.data.sum(axis=axis, keepdims=keepdims)

        def bw(g):
            if axis is None:
                self._accumulate(np.broadcast_to(g, self.data.shape))
            else:
                gg = g
                if not keepdims:
                    gg = np.expand_dims(g, axis)
                self._accumulate(np.broadcast_to(gg, self.data.shape))

        return Tensor._make(data, (self,), bw)

    def mean(self, axis=None, keepdims: bool = False):
        n = self.data.size if axis is None else self.data.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    # -- matmul --------------------------------------------------------------------

    def __matmul__(self, other):
        return matmul(self, other)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; supports stacked leading batch dims on `a` (and on both
    when they match). Backward accumulates into both operands."""
    if a.data.shape[-1] != b.data.shape[-2 if b.data.ndim > 1 else 0]:
        raise ValueError(f"matmul inner dims disagree: {a.data.shape} @ {b.data.shape}")
    data = np.matmul(a.data, b.data)

    def bw(g):
        if a.requires_grad:
            ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
            a._accumulate(_unbroadcast(ga, a.data.shape))
        if b.requires_grad:
            if b.data.ndim == 2 and a.data.ndim > 2:
                k = a.data.shape[-1]
                n = g.shape[-1]
                gb = a.data.reshape(-1, k).T @ g.reshape(-1, n)
            else:
                gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
                gb = _unbroadcast(gb, b.data.shape)
            b._accumulate(gb)

    return Tensor._make(data, (a, b), bw)


def where_const(x: Tensor, keep: np.ndarray, fill: float) -> Tensor:
    """Replace entries where `keep` is False with a constant (e.g. a large
    negative value before softmax). Gradient at filled entries is exactly zero."""
    keep = np.asarray(keep, dtype=bool)
    data = np.where(keep, x.data, np.asarray(fill, dtype=x.data.dtype))

    def bw(g):
        x._accumulate(np.where(keep, g, np.zeros((), dtype=g.dtype)))

    return Tensor._make(data, (x,), bw)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    m = np.max(x.data, axis=axis, keepdims=True)
    e = np.exp(x.data - m)
    y = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        x._accumulate(y * (g - dot))

    return Tensor._make(y, (x,), bw)


def gelu(x: Tensor) -> Tensor:
    """Exact-erf GELU."""
    inv_sqrt2 = 1.0 / math.sqrt(2.0)
    phi = 0.5 * (1.0 + erf(x.data * inv_sqrt2))
    y = x.data * phi

    def bw(g):
        pdf = np.exp(-0.5 * x.data * x.data) / math.sqrt(2.0 * math.pi)
        x._accumulate(g * (phi + x.data * pdf))

    return Tensor._make(y, (x,), bw)


def relu(x: Tensor) -> Tensor:
    y = np.maximum(x.data, 0.0)

    def bw(g):
        x._accumulate(g * (x.data > 0))

    return Tensor._make(y, (x,), bw)


def rms_norm(x: Tensor, gain: Tensor, eps: float = 1e-5) -> Tensor:
    """RMS normalization over the last axis with a learned gain."""
    d = x.data.shape[-1]
    ms = np.mean(x.data * x.data, axis=-1, keepdims=True)
    r = np.sqrt(ms + eps)
    xn = x.data / r
    y = xn * gain.data

    def bw(g):
        if x.requires_grad:
            gg = g * gain.data
            dot = np.sum(gg * x.data, axis=-1, keepdims=True)
            x._accumulate(gg / r - x.data * dot / (d * r ** 3))
        if gain.requires_grad:
            gain._accumulate(_unbroadcast(g * xn, gain.data.shape))

    return Tensor._make(y, (x, gain), bw)


def embedding(weight: Tensor, ids: np.ndarray) -> Tensor:
    """Row gather; backward scatter-adds with a fixed reduction order."""
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= weight.data.shape[0]):
        raise IndexError("embedding id out of range")
    data = weight.data[ids]

    def bw(g):
        gw = np.zeros_like(weight.data)
        np.add.at(gw, ids.reshape(-1), g.reshape(-1, weight.data.shape[-1]))
        weight._accumulate(gw)

    return Tensor._make(data, (weight,), bw)


CrossEntropyResult = namedtuple("CrossEntropyResult", ["loss", "active"])


def masked_cross_entropy(logits: Tensor, targets, mask) -> CrossEntropyResult:
    """Mean NLL over positions with mask weight 1.

    Positions with weight 0 contribute nothing: their targets are never read
    and their logit gradients are exactly zero. An all-masked sequence yields
    loss 0 with zero gradient, flagged via active == 0.
    """
    targets = np.asarray(targets, dtype=np.int64)
    w = np.asarray(mask, dtype=logits.data.dtype)
    t, v = logits.data.shape
    if targets.shape != (t,):
        raise ValueError(f"targets shape {targets.shape} does not match logits rows {t}")
    if w.shape != (t,):
        raise ValueError(f"mask shape {w.shape} does not match logits rows {t}")
    active_idx = np.nonzero(w != 0.0)[0]
    if active_idx.size and (targets[active_idx].min() < 0 or targets[active_idx].max() >= v):
        raise ValueError("target id out of vocabulary range at an unmasked position")

    m = logits.data.max(axis=-1, keepdims=True)
    z = logits.data - m
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    logp = z - lse  # [t, v]
    n_active = int(active_idx.size)
    if n_active == 0:
        loss_val = np.zeros((), dtype=logits.data.dtype)
    else:
        picked = logp[active_idx, targets[active_idx]]
        loss_val = np.asarray(-picked.sum() / n_active, dtype=logits.data.dtype)

    def bw(g):
        glog = np.zeros_like(logits.data)
        if n_active:
            p = np.exp(logp[active_idx])
            p[np.arange(n_active), targets[active_idx]] -= 1.0
            glog[active_idx] = p * (g / n_active)
        logits._accumulate(glog)

    loss = Tensor._make(loss_val, (logits,), bw)
    return CrossEntropyResult(loss, n_active)
