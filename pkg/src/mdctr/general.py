"""General (zero-shot) head: a tower over the pooled final backbone layer."""
from __future__ import annotations

import numpy as np

from .nn import Module, Tower
from .backbone import pool
from .tensor import Tensor


class GeneralHead(Module):
    def __init__(self, hidden_dim: int, tower_dims: tuple[int, ...], rng: np.random.Generator,
                 pooling: str = "mean", dropout: float = 0.0):
        super().__init__()
        self.pooling = pooling
        self.tower = Tower(hidden_dim, tower_dims, rng, dropout)

    def forward(self, h_last: Tensor, mask: np.ndarray) -> Tensor:
        return self.tower(pool(h_last, mask, self.pooling))

    def penultimate(self, h_last: Tensor, mask: np.ndarray) -> Tensor:
        return self.tower.penultimate(pool(h_last, mask, self.pooling))
