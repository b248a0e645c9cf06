"""Miniature transformer encoder exposing every layer output."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, ValidationError
from .nn import Embedding, Module, TransformerBlock
from .tensor import NumericalError, Tensor


@dataclass
class BackboneConfig:
    vocab_size: int = 8192
    num_layers: int = 8
    hidden_dim: int = 128
    num_heads: int = 4
    ffn_dim: int = 256
    max_seq_len: int = 128
    causal: bool = False
    pooling: str = "mean"
    dropout: float = 0.0

    def validate(self) -> None:
        if self.num_layers < 1:
            raise ConfigError("backbone needs at least one layer")
        if self.hidden_dim % self.num_heads:
            raise ConfigError(f"hidden_dim {self.hidden_dim} not divisible by num_heads {self.num_heads}")
        if self.pooling not in ("mean", "first"):
            raise ConfigError(f"pooling must be 'mean' or 'first', got {self.pooling!r}")
        if self.max_seq_len < 2:
            raise ConfigError("max_seq_len must be >= 2")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TapSet:
    """Embedding output plus every transformer layer output, h[0..L]."""

    h: list[Tensor]
    mask: np.ndarray
    rows: np.ndarray | None = None  # set by select(): positions in the original batch
    full: int | None = None

    def __len__(self) -> int:
        return len(self.h)

    @property
    def last(self) -> Tensor:
        return self.h[-1]

    def select(self, rows: np.ndarray) -> "TapSet":
        """Row subset of the batch, differentiable back into the full taps."""
        rows = np.asarray(rows)
        origin = rows if self.rows is None else self.rows[rows]
        full = len(self.mask) if self.full is None else self.full
        return TapSet([t[rows] for t in self.h], self.mask[rows], origin, full)


def pool(h: Tensor, mask: np.ndarray, mode: str = "mean") -> Tensor:
    """Sequence -> vector: masked mean or the first position."""
    m = np.asarray(mask)
    if not m.any(axis=1).all():
        raise ValidationError("pool: a sequence has no unmasked position")
    if mode == "first":
        return h[:, 0, :]
    if mode != "mean":
        raise ConfigError(f"unknown pooling mode {mode!r}")
    w = (m / m.sum(axis=1, keepdims=True)).astype(h.dtype)[:, :, None]
    return (h * Tensor._wrap(w, False)).sum(axis=1)


class Backbone(Module):
    def __init__(self, cfg: BackboneConfig, rng: np.random.Generator):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        self.tok = Embedding(cfg.vocab_size, cfg.hidden_dim, rng)
        self.pos = Embedding(cfg.max_seq_len, cfg.hidden_dim, rng)
        self.blocks: list[TransformerBlock] = []
        for i in range(cfg.num_layers):
            blk = TransformerBlock(cfg.hidden_dim, cfg.num_heads, cfg.ffn_dim, rng, cfg.causal, cfg.dropout)
            setattr(self, f"layer{i}", blk)
            self.blocks.append(blk)

    def embed(self, ids: np.ndarray, mask: np.ndarray) -> Tensor:
        """Token plus positional embedding; PAD positions carry the bare PAD row."""
        b, s = ids.shape
        if s > self.cfg.max_seq_len:
            raise ConfigError(f"sequence length {s} exceeds max_seq_len {self.cfg.max_seq_len}")
        pos = self.pos.weight[np.arange(s)]
        keep = Tensor._wrap(np.asarray(mask, dtype=pos.dtype)[:, :, None], False)
        return self.tok(ids) + pos * keep

    def forward_collect(self, h0: Tensor, mask: np.ndarray) -> TapSet:
        h = [h0]
        for i, blk in enumerate(self.blocks, start=1):
            out = blk(h[-1], mask)
            if not np.isfinite(out.data).all():
                raise NumericalError(f"non-finite activations in backbone layer {i}")
            h.append(out)
        return TapSet(h, np.asarray(mask))

    def forward(self, ids: np.ndarray, mask: np.ndarray) -> TapSet:
        return self.forward_collect(self.embed(ids, mask), mask)

    def pool(self, h: Tensor, mask: np.ndarray) -> Tensor:
        return pool(h, mask, self.cfg.pooling)
