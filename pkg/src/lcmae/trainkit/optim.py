"""AdamW with decoupled weight decay and the warmup + cosine learning-rate schedule."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np


@dataclass
class ScheduleParams:
    base_lr: float = 1.5e-4
    batch_size: int = 128
    warmup_epochs: float = 20
    total_epochs: float = 100
    steps_per_epoch: int = 1

    @property
    def lr(self) -> float:
        """Effective peak rate: base_lr * batch_size / 256."""
        return self.base_lr * self.batch_size / 256.0

    @property
    def warmup_steps(self) -> int:
        return int(round(self.warmup_epochs * self.steps_per_epoch))

    @property
    def total_steps(self) -> int:
        return int(round(self.total_epochs * self.steps_per_epoch))

    def to_dict(self) -> dict:
        return asdict(self)


def lr_at(step: int, sched: ScheduleParams) -> float:
    """Linear warmup from 0 to the peak rate, then half-cosine down to 0."""
    peak = sched.lr
    warm, total = sched.warmup_steps, sched.total_steps
    if step < warm:
        return peak * step / warm
    if step >= total:
        return 0.0
    progress = (step - warm) / max(1, total - warm)
    return peak * 0.5 * (1.0 + math.cos(math.pi * progress))


def default_no_decay(name: str, value: np.ndarray) -> bool:
    # biases, norm scales and learned tokens are exempt
    return value.ndim < 2 or name.endswith("token")


class AdamW:
    def __init__(self, named_params, lr: float = 1e-3, betas=(0.9, 0.95), eps: float = 1e-8,
                 weight_decay: float = 0.05, no_decay=default_no_decay):
        self.params = list(named_params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.decay = [not no_decay(n, p.data) for n, p in self.params]
        self.m = [np.zeros_like(p.data) for _, p in self.params]
        self.v = [np.zeros_like(p.data) for _, p in self.params]
        self.t = 0

    def zero_grad(self) -> None:
        for _, p in self.params:
            p.grad = None

    def step(self, lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for i, (_, p) in enumerate(self.params):
            if p.grad is None:
                continue
            g = p.grad.astype(p.data.dtype, copy=False)
            m, v = self.m[i], self.v[i]
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            data = p.data
            if self.decay[i] and self.weight_decay:
                data = data * (1.0 - lr * self.weight_decay)
            step = (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.data = (data - lr * step).astype(p.data.dtype, copy=False)

    def state(self) -> dict[str, np.ndarray]:
        out = {"__t": np.array([self.t], dtype=np.int64)}
        for (name, _), m, v in zip(self.params, self.m, self.v):
            out[f"m.{name}"] = m
            out[f"v.{name}"] = v
        return out
