"""AdamW with decoupled weight decay, plus the warmup/cosine schedules."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from .tensor import Parameter

log = logging.getLogger(__name__)


@dataclass
class OptimizerConfig:
    base_lr: float = 5.0e-5
    start_lr: float = 5.0e-6
    final_lr: float = 5.0e-7
    warmup_epochs: float = 10
    total_epochs: float = 100
    wd_start: float = 0.04
    wd_final: float = 0.4
    betas: tuple[float, float] = (0.9, 0.999)
    epsilon: float = 1e-8

    def __post_init__(self):
        self.betas = tuple(self.betas)
        if not (self.start_lr <= self.base_lr and self.final_lr <= self.base_lr):
            raise ValueError("start_lr and final_lr must not exceed base_lr")
        if not (0 <= self.warmup_epochs <= self.total_epochs) or self.total_epochs <= 0:
            raise ValueError("need 0 <= warmup_epochs <= total_epochs and total_epochs > 0")

    def lr_at(self, progress: float) -> float:
        """Learning rate at ``progress`` = epoch / total_epochs in [0, 1]."""
        p = min(max(progress, 0.0), 1.0)
        w = self.warmup_epochs / self.total_epochs
        if w > 0 and p < w:
            return self.start_lr + (self.base_lr - self.start_lr) * p / w
        if w >= 1.0:
            return self.base_lr
        q = (p - w) / (1.0 - w)
        return self.final_lr + 0.5 * (self.base_lr - self.final_lr) * (1.0 + math.cos(math.pi * q))

    def wd_at(self, progress: float) -> float:
        """Weight decay, cosine ramp from ``wd_start`` to ``wd_final``."""
        p = min(max(progress, 0.0), 1.0)
        return self.wd_final + 0.5 * (self.wd_start - self.wd_final) * (1.0 + math.cos(math.pi * p))


def ema_momentum_at(progress: float, start: float = 0.996, end: float = 1.0) -> float:
    p = min(max(progress, 0.0), 1.0)
    return start + (end - start) * p


class AdamW:
    def __init__(self, params: list[Parameter], config: OptimizerConfig):
        self.params = [p for p in params if p.trainable]
        self.config = config
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def step(self, lr: float, wd: float) -> None:
        """One update at rate ``lr`` and decay coefficient ``wd``."""
        b1, b2 = self.config.betas
        eps = self.config.epsilon
        self.t += 1
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            if not np.all(np.isfinite(g)):
                raise FloatingPointError(f"non-finite gradient in parameter {p.name!r}")
            if p.decay and wd:
                p.data *= 1.0 - lr * wd
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p.data -= (lr * (m / c1) / (np.sqrt(v / c2) + eps)).astype(p.data.dtype)

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for i, (m, v) in enumerate(zip(self.m, self.v)):
            out[f"adam.m.{i}"] = m
            out[f"adam.v.{i}"] = v
        return out


def adamw_step(params: list[Parameter], config: OptimizerConfig, step: int, optimizer: AdamW | None = None) -> AdamW:
    """Apply one AdamW update using the schedules at ``step / total_epochs``.

    ``step`` is measured in epochs (may be fractional). Pass ``optimizer`` to
    keep moment state across calls; otherwise a fresh one is created.
    """
    opt = optimizer or AdamW(params, config)
    progress = step / config.total_epochs
    opt.step(config.lr_at(progress), config.wd_at(progress))
    return opt
