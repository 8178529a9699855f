"""Plain SGD and the tri-stage learning-rate schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .autodiff import NumericError, Tensor, backward


@dataclass(frozen=True)
class TriStageSchedule:
    """Linear warm-up, constant hold, then exponential decay to ``final_scale * peak``."""

    peak: float
    total_steps: int
    warmup_frac: float = 0.10
    hold_frac: float = 0.80
    final_scale: float = 0.01

    def __call__(self, step: int) -> float:
        n = self.total_steps
        warm = self.warmup_frac * n
        hold_end = (self.warmup_frac + self.hold_frac) * n
        if step < warm:
            return self.peak * step / warm
        if step < hold_end or n - hold_end <= 0:
            return self.peak
        frac = min(1.0, (step - hold_end) / (n - hold_end))
        return self.peak * self.final_scale ** frac


class SGD:
    """Vanilla stochastic gradient descent over a parameter dict.

    ``clip`` bounds the global gradient norm; it never activates in a healthy run
    and exists to keep a diverging step from poisoning the weights with inf.
    """

    def __init__(self, params: dict[str, Tensor], schedule, clip: float | None = 5.0):
        self.params = [p for p in params.values() if p.requires_grad]
        self.schedule = schedule
        self.clip = clip

    def step(self, loss: Tensor, step: int) -> float:
        if not math.isfinite(loss.item()):
            raise NumericError(f"non-finite loss {loss.item()} at step {step}")
        for p in self.params:
            p.grad = None
        backward(loss)
        lr = self.schedule(step)
        grads = [p.grad for p in self.params]
        if self.clip is not None:
            norm = math.sqrt(sum(float(np.vdot(g, g)) for g in grads if g is not None))
            if norm > self.clip:
                lr *= self.clip / norm
        for p, g in zip(self.params, grads):
            if g is not None:
                p.data -= lr * g
            p.grad = None
        return lr
