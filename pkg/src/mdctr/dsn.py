"""Domain-specific network: ladder side network, attention-pooling gate, tower."""
from __future__ import annotations

from contextlib import nullcontext
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .backbone import BackboneConfig, TapSet
from .errors import ConfigError, ValidationError
from .nn import (
    FeedForward, LayerNorm, Linear, Module, MultiHeadSelfAttention, Parameter, Tower, TransformerBlock, batch_rows,
)
from .tensor import Tensor

LADDER_BLOCKS = ("mlp", "attention", "transformer")
PUBLISHED_TOWER_DIMS = (512, 256, 128)


@dataclass
class DsnConfig:
    domain_name: str
    tap_frequency: int = 2
    ladder_dim: int = 64
    ladder_block: str = "transformer"
    ladder_heads: int = 2
    ladder_ffn_dim: int = 128
    gate_dim: int = 64
    tower_dims: tuple[int, ...] = field(default=(64, 32, 16))
    dropout: float = 0.0

    def num_ladders(self, num_layers: int) -> int:
        if self.tap_frequency < 1 or num_layers % self.tap_frequency:
            raise ConfigError(
                f"tap frequency {self.tap_frequency} does not divide backbone depth {num_layers}"
            )
        return num_layers // self.tap_frequency

    def validate(self) -> None:
        if not self.domain_name or "." in self.domain_name:
            raise ConfigError(f"domain name must be non-empty and dot-free, got {self.domain_name!r}")
        if self.ladder_block not in LADDER_BLOCKS:
            raise ConfigError(f"ladder_block must be one of {LADDER_BLOCKS}, got {self.ladder_block!r}")
        if self.ladder_block != "mlp" and self.ladder_dim % self.ladder_heads:
            raise ConfigError(f"ladder_dim {self.ladder_dim} not divisible by ladder_heads {self.ladder_heads}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["tower_dims"] = list(self.tower_dims)
        return d


class LadderMLP(Module):
    def __init__(self, d: int, d_ff: int, rng: np.random.Generator):
        super().__init__()
        self.ln = LayerNorm(d)
        self.ffn = FeedForward(d, d_ff, rng)

    def forward(self, x: Tensor, mask: np.ndarray) -> Tensor:
        return x + self.ffn(self.ln(x))


class LadderAttention(Module):
    def __init__(self, d: int, heads: int, rng: np.random.Generator):
        super().__init__()
        self.ln = LayerNorm(d)
        self.attn = MultiHeadSelfAttention(d, heads, rng)

    def forward(self, x: Tensor, mask: np.ndarray) -> Tensor:
        return x + self.attn(self.ln(x), mask)


def make_ladder_block(cfg: DsnConfig, rng: np.random.Generator) -> Module:
    if cfg.ladder_block == "mlp":
        return LadderMLP(cfg.ladder_dim, cfg.ladder_ffn_dim, rng)
    if cfg.ladder_block == "attention":
        return LadderAttention(cfg.ladder_dim, cfg.ladder_heads, rng)
    return TransformerBlock(cfg.ladder_dim, cfg.ladder_heads, cfg.ladder_ffn_dim, rng, dropout=cfg.dropout)


class DomainSpecificNetwork(Module):
    def __init__(self, cfg: DsnConfig, backbone: BackboneConfig, rng: np.random.Generator):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        self.name = cfg.domain_name
        self.num_layers = backbone.num_layers
        self.num_ladders = cfg.num_ladders(backbone.num_layers)
        d, ds = backbone.hidden_dim, cfg.ladder_dim
        self.projections: list[Linear] = []
        self.ladders: list[Module] = []
        for f in range(1, self.num_ladders + 1):
            proj, block = Linear(d, ds, rng), make_ladder_block(cfg, rng)
            setattr(self, f"proj{f}", proj)
            setattr(self, f"ladder{f}", block)
            self.projections.append(proj)
            self.ladders.append(block)
        self.q_proj = Linear(d, ds, rng)
        bound = 1.0 / np.sqrt(ds)
        self.w_k = Parameter(rng.uniform(-bound, bound, size=(ds, cfg.gate_dim)))
        self.w_q = Parameter(rng.uniform(-1.0 / np.sqrt(cfg.gate_dim), 1.0 / np.sqrt(cfg.gate_dim),
                                         size=(cfg.gate_dim, 1)))
        self.tower = Tower(ds, cfg.tower_dims, rng, cfg.dropout)
        self.frozen = False

    def freeze(self) -> None:
        self.frozen = True
        self.set_requires_grad(False)

    def unfreeze(self) -> None:
        self.frozen = False
        self.set_requires_grad(True)

    def ladder_forward(self, taps: TapSet) -> Tensor:
        """lad_1 = Ladder_1(P_1 h_phi); lad_f = Ladder_f(P_f h_{f phi} + lad_{f-1})."""
        if len(taps) != self.num_layers + 1:
            raise ConfigError(f"DSN {self.name!r} expects {self.num_layers + 1} taps, got {len(taps)}")
        phi = self.cfg.tap_frequency
        lad = None
        for f, (proj, block) in enumerate(zip(self.projections, self.ladders), start=1):
            x = proj(taps.h[f * phi])
            lad = block(x if lad is None else x + lad, taps.mask)
        return lad

    def gate_fuse(self, h_last: Tensor, lad: Tensor, mask: np.ndarray) -> tuple[Tensor, Tensor]:
        """Attention pooling over the sequence-axis concat of (Q h_L, lad_F).

        Returns (R, A): the pooled vector (batch x d_s) and the weights
        (batch x 2*seq), which are exactly zero on padded positions.
        """
        mask = np.asarray(mask, dtype=bool)
        if not mask.any(axis=1).all():
            raise ValidationError("gate: a sample has no unmasked position")
        o = T.concat([self.q_proj(h_last), lad], axis=1)
        b, s2, ds = o.shape
        score = (T.tanh(o @ self.w_k) @ self.w_q).reshape(b, s2)
        a = T.softmax(score, axis=1, mask=np.concatenate([mask, mask], axis=1))
        r = (a.reshape(b, 1, s2) @ o).reshape(b, ds)
        return r, a

    def represent(self, taps: TapSet) -> Tensor:
        r, _ = self.gate_fuse(taps.last, self.ladder_forward(taps), taps.mask)
        return r

    def forward(self, taps: TapSet) -> Tensor:
        with _subset(taps):
            return self.tower(self.represent(taps))

    def penultimate(self, taps: TapSet) -> Tensor:
        with _subset(taps):
            return self.tower.penultimate(self.represent(taps))


def _subset(taps: TapSet):
    return nullcontext() if taps.rows is None else batch_rows(taps.rows, taps.full)
