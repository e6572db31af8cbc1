"""AdamW with global-norm clipping, plus the warmup+cosine LR schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional

import numpy as np

from .tensor import Tensor

__all__ = ["LrSchedule", "lr_at", "OptimizerState", "AdamW", "NonFiniteGradError"]


class NonFiniteGradError(RuntimeError):
    """Raised before any state is touched when a gradient is NaN/Inf."""


@dataclass
class LrSchedule:
    """Linear warmup to `peak_lr`, then cosine decay to zero at `total_steps`."""

    peak_lr: float
    total_steps: int
    warmup_steps: Optional[int] = None
    warmup_ratio: Optional[float] = None

    def __post_init__(self):
        if self.warmup_steps is None:
            ratio = 0.0 if self.warmup_ratio is None else self.warmup_ratio
            self.warmup_steps = int(round(ratio * self.total_steps))
        if self.total_steps <= 0:
            raise ValueError("total_steps must be positive")
        if not (0 <= self.warmup_steps <= self.total_steps):
            raise ValueError("warmup_steps out of range")


def lr_at(schedule: LrSchedule, step: int) -> float:
    """LR at an integer step; steps past the end clamp to the final value (0)."""
    if step < 0:
        raise ValueError("step must be non-negative")
    w, total = schedule.warmup_steps, schedule.total_steps
    if step >= total:
        return 0.0
    if w > 0 and step < w:
        return schedule.peak_lr * step / w
    if total == w:
        return schedule.peak_lr
    progress = (step - w) / (total - w)
    return schedule.peak_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


@dataclass
class OptimizerState:
    """Per-parameter Adam moments plus the shared hyperparameters."""

    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-8
    weight_decay: float = 0.1
    max_grad_norm: float = 1.0
    step_count: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)


class AdamW:
    """Decoupled-weight-decay Adam over a named parameter dict.

    Update order per step: global-norm clip -> moment update with bias
    correction -> parameter update -> decoupled decay.
    """

    def __init__(
        self,
        params: Dict[str, Tensor],
        beta1: float = 0.9,
        beta2: float = 0.98,
        eps: float = 1e-8,
        weight_decay: float = 0.1,
        max_grad_norm: float = 1.0,
    ):
        self.params = params
        self.state = OptimizerState(beta1, beta2, eps, weight_decay, max_grad_norm)
        for name, p in params.items():
            self.state.m[name] = np.zeros_like(p.data)
            self.state.v[name] = np.zeros_like(p.data)

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def clip_grads_(self) -> float:
        """Scale all grads in place so the global L2 norm is at most the cap.
        Returns the pre-clip norm."""
        sq = 0.0
        for name, p in self.params.items():
            if p.grad is None:
                continue
            if not np.all(np.isfinite(p.grad)):
                raise NonFiniteGradError(f"non-finite gradient in parameter {name!r}")
            sq += float(np.sum(p.grad.astype(np.float64) ** 2))
        norm = math.sqrt(sq)
        cap = self.state.max_grad_norm
        if cap > 0 and norm > cap:
            scale = cap / norm
            for p in self.params.values():
                if p.grad is not None:
                    p.grad = p.grad * np.asarray(scale, dtype=p.grad.dtype)
        return norm

    def step(self, lr: float) -> float:
        """One AdamW step at learning rate `lr`. Returns the pre-clip grad norm."""
        norm = self.clip_grads_()
        s = self.state
        s.step_count += 1
        bc1 = 1.0 - s.beta1 ** s.step_count
        bc2 = 1.0 - s.beta2 ** s.step_count
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            m = s.m[name]
            v = s.v[name]
            m *= s.beta1
            m += (1.0 - s.beta1) * g
            v *= s.beta2
            v += (1.0 - s.beta2) * (g * g)
            m_hat = m / bc1
            v_hat = v / bc2
            p.data -= np.asarray(lr, dtype=p.data.dtype) * (
                m_hat / (np.sqrt(v_hat) + s.eps)
            ).astype(p.data.dtype)
            if s.weight_decay:
                p.data -= np.asarray(lr * s.weight_decay, dtype=p.data.dtype) * p.data
        return norm
