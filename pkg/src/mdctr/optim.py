"""Plain SGD, AdamW with decoupled weight decay, triangular cyclic LR."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .nn import Parameter
from .tensor import NumericalError


@dataclass
class OptimizerState:
    lr: float
    weight_decay: float = 0.0
    step: int = 0
    exp_avg: dict[str, np.ndarray] = field(default_factory=dict)
    exp_avg_sq: dict[str, np.ndarray] = field(default_factory=dict)


def _check_finite(name: str, g: np.ndarray) -> None:
    if not np.all(np.isfinite(g)):
        bad = int(np.size(g) - np.isfinite(g).sum())
        raise NumericalError(f"non-finite gradient in parameter {name!r} ({bad} entries)")


class SGD:
    def __init__(self, params: dict[str, Parameter], lr: float, weight_decay: float = 0.0):
        self.params = dict(params)
        self.state = OptimizerState(lr=lr, weight_decay=weight_decay)

    def step(self, grads: dict[str, np.ndarray]) -> None:
        lr, wd = self.state.lr, self.state.weight_decay
        for name in grads:
            _check_finite(name, grads[name])
        for name, p in self.params.items():
            g = grads[name]
            if g.shape != p.shape:
                raise ValueError(f"{name}: gradient shape {g.shape} vs parameter {p.shape}")
            if wd:
                p.data -= p.data.dtype.type(lr * wd) * p.data
            p.data -= p.data.dtype.type(lr) * g
        self.state.step += 1


class AdamW:
    """Adam moments with weight decay applied directly to the weights."""

    def __init__(self, params: dict[str, Parameter], lr: float = 1e-3, betas=(0.9, 0.999),
                 eps: float = 1e-8, weight_decay: float = 0.01):
        self.params = dict(params)
        self.betas = betas
        self.eps = eps
        self.state = OptimizerState(lr=lr, weight_decay=weight_decay)
        for name, p in self.params.items():
            self.state.exp_avg[name] = np.zeros_like(p.data)
            self.state.exp_avg_sq[name] = np.zeros_like(p.data)

    def step(self, grads: dict[str, np.ndarray]) -> None:
        for name in grads:
            _check_finite(name, grads[name])
        st = self.state
        st.step += 1
        b1, b2 = self.betas
        bc1 = 1.0 - b1**st.step
        bc2 = 1.0 - b2**st.step
        for name, p in self.params.items():
            g = grads[name]
            if g.shape != p.shape:
                raise ValueError(f"{name}: gradient shape {g.shape} vs parameter {p.shape}")
            m, v = st.exp_avg[name], st.exp_avg_sq[name]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            if st.weight_decay:
                p.data *= p.data.dtype.type(1.0 - st.lr * st.weight_decay)
            denom = np.sqrt(v / bc2) + self.eps
            p.data -= (st.lr / bc1) * m / denom


class CyclicLR:
    """Triangular schedule: ``low`` at step 0, ``high`` half a period later."""

    def __init__(self, low: float, high: float, period_steps: int):
        if not 0 < low <= high:
            raise ValueError(f"need 0 < low <= high, got [{low}, {high}]")
        if period_steps < 2:
            raise ValueError("cycle period must span at least 2 steps")
        self.low, self.high = low, high
        self.half = period_steps / 2.0

    def __call__(self, step: int) -> float:
        x = abs(step / self.half - 2 * np.floor(step / (2 * self.half)) - 1)
        return self.low + (self.high - self.low) * max(0.0, 1.0 - x)
