from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autograd import Tensor


@dataclass(frozen=True)
class OptimizerConfig:
    name: str = "adamw"
    lr: float = 3e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-6
    weight_decay: float = 0.01
    warmup_fraction: float = 0.1

    def __post_init__(self):
        if self.name not in ("adamw", "sgd"):
            raise ValueError(f"optimizer.name must be adamw or sgd, got {self.name!r}")
        if self.lr <= 0:
            raise ValueError("optimizer.lr must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("optimizer betas must lie in [0, 1)")
        if not 0 <= self.warmup_fraction < 1:
            raise ValueError("optimizer.warmup_fraction must lie in [0, 1)")


def linear_schedule(step: int, total: int, warmup_fraction: float) -> float:
    """Linear warmup then linear decay to zero; ``step`` counts from 0."""
    warm = int(warmup_fraction * total)
    if warm and step < warm:
        return (step + 1) / warm
    return max(0.0, (total - step) / max(1, total - warm))


class Optimizer:
    """AdamW (decoupled weight decay) or plain SGD over a fixed tensor list."""

    def __init__(self, params: list[Tensor], config: OptimizerConfig, total_steps: int):
        self.params = params
        self.config = config
        self.total_steps = max(1, total_steps)
        self.step_count = 0
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        c = self.config
        lr = c.lr * linear_schedule(self.step_count, self.total_steps, c.warmup_fraction)
        self.step_count += 1
        t = self.step_count
        for i, p in enumerate(self.params):
            if p.grad is None:
                continue
            g = p.grad
            if c.name == "sgd":
                p.data -= lr * g
                continue
            self.m[i] = c.beta1 * self.m[i] + (1 - c.beta1) * g
            self.v[i] = c.beta2 * self.v[i] + (1 - c.beta2) * g * g
            mhat = self.m[i] / (1 - c.beta1 ** t)
            vhat = self.v[i] / (1 - c.beta2 ** t)
            p.data -= lr * (mhat / (np.sqrt(vhat) + c.eps) + c.weight_decay * p.data)
