"""First-order optimisers and the milestone learning-rate schedule."""

from __future__ import annotations

import bisect
from dataclasses import dataclass, field

import numpy as np

from ..errors import NumericError

NONFINITE_POLICIES = ("raise", "skip")


@dataclass
class OptimizerState:
    lr: float
    step_count: int = 0
    moments: dict = field(default_factory=dict)  # param index -> array(s)


class _Optimizer:
    def __init__(self, params, lr, weight_decay=0.0, nonfinite="raise"):
        self.params = list(params)
        if lr <= 0:
            raise ValueError(f"learning rate must be positive, got {lr}")
        if weight_decay < 0:
            raise ValueError(f"weight_decay must be non-negative, got {weight_decay}")
        if nonfinite not in NONFINITE_POLICIES:
            raise ValueError(f"nonfinite must be one of {NONFINITE_POLICIES}")
        self.weight_decay = weight_decay
        self.nonfinite = nonfinite
        self.state = OptimizerState(lr=lr)
        self.skipped = []

    @property
    def lr(self):
        return self.state.lr

    @lr.setter
    def lr(self, value):
        self.state.lr = float(value)

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def _grad(self, i, p):
        g = p.grad
        if g is None:
            return np.zeros_like(p.data)
        if not np.all(np.isfinite(g)):
            if self.nonfinite == "raise":
                label = p.name or f"param[{i}]"
                raise NumericError(f"non-finite gradient for {label} at step {self.state.step_count + 1}")
            self.skipped.append((self.state.step_count + 1, i))
            return None
        if self.weight_decay:
            g = g + self.weight_decay * p.data
        return g

    def step(self):
        self.state.step_count += 1
        for i, p in enumerate(self.params):
            g = self._grad(i, p)
            if g is not None:
                self._update(i, p, g)

    def _update(self, i, p, g):
        raise NotImplementedError


class Adam(_Optimizer):
    """Adam with bias correction."""

    def __init__(self, params, lr=5e-4, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0, nonfinite="raise"):
        super().__init__(params, lr, weight_decay, nonfinite)
        self.betas = betas
        self.eps = eps

    def _update(self, i, p, g):
        b1, b2 = self.betas
        m, v = self.state.moments.get(i, (np.zeros_like(p.data), np.zeros_like(p.data)))
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        self.state.moments[i] = (m, v)
        t = self.state.step_count
        mhat = m / (1 - b1**t)
        vhat = v / (1 - b2**t)
        p.data = (p.data - self.lr * mhat / (np.sqrt(vhat) + self.eps)).astype(p.data.dtype, copy=False)


class SGD(_Optimizer):
    """SGD with (optionally Nesterov) momentum."""

    def __init__(self, params, lr=0.05, momentum=0.9, nesterov=False, weight_decay=0.0, nonfinite="raise"):
        super().__init__(params, lr, weight_decay, nonfinite)
        self.momentum = momentum
        self.nesterov = nesterov

    def _update(self, i, p, g):
        buf = self.state.moments.get(i)
        buf = g.copy() if buf is None else self.momentum * buf + g
        self.state.moments[i] = buf
        d = g + self.momentum * buf if self.nesterov else buf
        p.data = (p.data - self.lr * d).astype(p.data.dtype, copy=False)


class MultiStepLR:
    """Multiply the learning rate by ``gamma`` at each milestone epoch."""

    def __init__(self, optimizer, milestones, gamma=0.1):
        milestones = list(milestones)
        if any(b <= a for a, b in zip(milestones, milestones[1:])):
            raise ValueError(f"milestones must be strictly increasing, got {milestones}")
        self.optimizer = optimizer
        self.milestones = milestones
        self.gamma = gamma
        self.base_lr = optimizer.lr
        self.epoch = 0

    def lr_at(self, epoch):
        return self.base_lr * self.gamma ** bisect.bisect_right(self.milestones, epoch)

    def step(self):
        """Advance one epoch and update the optimiser's learning rate."""
        self.epoch += 1
        self.optimizer.lr = self.lr_at(self.epoch)
        return self.optimizer.lr
