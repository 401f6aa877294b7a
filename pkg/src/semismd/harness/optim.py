"""Optimizers and the warm-up + cosine learning-rate schedule."""
from __future__ import annotations

import math

import numpy as np


def learning_rate(step: int, total: int, base: float, warmup_fraction: float = 0.05) -> float:
    """Linear warm-up over the first fraction of steps, cosine decay to zero after."""
    if total <= 0:
        return base
    warm = int(round(warmup_fraction * total))
    if warm > 0 and step < warm:
        return base * (step + 1) / warm
    span = max(total - warm, 1)
    progress = min(max(step - warm, 0) / span, 1.0)
    return base * 0.5 * (1.0 + math.cos(math.pi * progress))


class SGD:
    def __init__(self, params, momentum: float = 0.9):
        self.params = list(params)
        self.momentum = momentum
        self.velocity = [np.zeros_like(p.data) for p in self.params]

    def step(self, lr: float) -> None:
        for p, v in zip(self.params, self.velocity):
            if p.grad is None:
                continue
            v *= self.momentum
            v += p.grad
            p.data -= (lr * v).astype(p.data.dtype)


class Adam:
    def __init__(self, params, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.b1, self.b2, self.eps = beta1, beta2, eps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self, lr: float) -> None:
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            upd = (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.data -= (lr * upd).astype(p.data.dtype)


def make_optimizer(name: str, params, momentum: float = 0.9):
    if name == "adam":
        return Adam(params)
    if name == "sgd":
        return SGD(params, momentum)
    raise ValueError(f"unknown optimizer {name!r}")
