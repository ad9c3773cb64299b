from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Optional

import numpy as np

from .autograd import Tensor


@dataclass
class WarmupInvSqrt:
    """Linear warmup to ``peak`` over ``warmup`` steps, then ``peak * sqrt(warmup / t)``."""

    peak: float
    warmup: int = 0

    def __call__(self, step: int) -> float:
        if step < 1:
            raise ValueError("steps are counted from 1")
        if self.warmup <= 0:
            return self.peak
        if step <= self.warmup:
            return self.peak * step / self.warmup
        return self.peak * np.sqrt(self.warmup / step)


class Adam:
    def __init__(self, params: dict[str, Tensor], schedule: WarmupInvSqrt, betas=(0.9, 0.999),
                 eps: float = 1e-8, grad_clip: Optional[float] = None, trainable: Optional[Iterable[str]] = None):
        self.params = params
        self.schedule = schedule
        self.b1, self.b2 = betas
        self.eps = eps
        self.grad_clip = grad_clip
        self.trainable = list(trainable) if trainable is not None else list(params)
        self.m = {k: np.zeros_like(params[k].data) for k in self.trainable}
        self.v = {k: np.zeros_like(params[k].data) for k in self.trainable}
        self.t = 0
        self.last_lr = 0.0

    def step(self) -> float:
        """Apply one update using the ``.grad`` of each trainable parameter; returns the lr used."""
        grads = {}
        for k in self.trainable:
            g = self.params[k].grad
            if g is None:
                g = np.zeros_like(self.params[k].data)
            if g.shape != self.params[k].data.shape:
                raise ValueError(f"gradient shape {g.shape} != parameter shape {self.params[k].shape} for {k}")
            grads[k] = g
        if self.grad_clip:
            norm = np.sqrt(sum(float((g.astype(np.float64) ** 2).sum()) for g in grads.values()))
            if norm > self.grad_clip:
                grads = {k: g * (self.grad_clip / norm) for k, g in grads.items()}
        self.t += 1
        lr = self.schedule(self.t)
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for k, g in grads.items():
            m = self.m[k] = self.b1 * self.m[k] + (1.0 - self.b1) * g
            v = self.v[k] = self.b2 * self.v[k] + (1.0 - self.b2) * g * g
            p = self.params[k]
            p.data = (p.data - lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.data.dtype, copy=False)
        self.last_lr = lr
        return lr

    def rebind(self, params: dict[str, Tensor]) -> None:
        self.params = params
