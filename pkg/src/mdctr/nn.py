"""Small module system on top of :mod:`mdctr.tensor`."""
from __future__ import annotations

import threading
from collections import OrderedDict
from contextlib import contextmanager
from typing import Iterator

import numpy as np

from . import tensor as T
from .tensor import Tensor


class Parameter(Tensor):
    __slots__ = ()

    def __init__(self, data, name: str | None = None):
        super().__init__(data, requires_grad=True, name=name)


class Module:
    """Attribute-registered parameters and submodules, torch style."""

    def __init__(self):
        object.__setattr__(self, "_params", OrderedDict())
        object.__setattr__(self, "_children", OrderedDict())
        object.__setattr__(self, "training", False)

    def __setattr__(self, key, value):
        if isinstance(value, Parameter):
            self._params[key] = value
        elif isinstance(value, Module):
            self._children[key] = value
        object.__setattr__(self, key, value)

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for k, p in self._params.items():
            yield prefix + k, p
        for k, m in self._children.items():
            yield from m.named_parameters(prefix + k + ".")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self.parameters())

    def modules(self) -> Iterator["Module"]:
        yield self
        for m in self._children.values():
            yield from m.modules()

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            object.__setattr__(m, "training", mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def set_requires_grad(self, flag: bool) -> None:
        for p in self.parameters():
            p.requires_grad = flag

    def to_precision(self, bits: int) -> "Module":
        dtype = np.float64 if bits == 64 else np.float32
        for p in self.parameters():
            p.data = np.ascontiguousarray(p.data, dtype=dtype)
        return self

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((k, p.data.copy()) for k, p in self.named_parameters())

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = set(own) - set(state)
        extra = set(state) - set(own)
        if missing or extra:
            raise KeyError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(extra)}")
        for k, p in own.items():
            arr = np.asarray(state[k])
            if arr.shape != p.shape:
                raise T.DimensionError(f"{k}: checkpoint shape {arr.shape} vs parameter {p.shape}")
            p.data = np.ascontiguousarray(arr, dtype=p.data.dtype)

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def _uniform(rng: np.random.Generator, fan_in: int, shape) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True):
        super().__init__()
        self.weight = Parameter(_uniform(rng, d_in, (d_in, d_out)))
        self.bias = Parameter(np.zeros(d_out)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        y = x @ self.weight
        return y + self.bias if self.bias is not None else y


class LayerNorm(Module):
    def __init__(self, d: int, eps: float = 1e-5):
        super().__init__()
        self.gain = Parameter(np.ones(d))
        self.bias = Parameter(np.zeros(d))
        self.eps = eps

    def forward(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gain, self.bias, self.eps)


class Embedding(Module):
    def __init__(self, n: int, d: int, rng: np.random.Generator, scale: float = 0.1):
        super().__init__()
        self.weight = Parameter(rng.normal(0.0, scale, size=(n, d)))

    def forward(self, ids: np.ndarray) -> Tensor:
        return T.embedding(self.weight, ids)


_ROWS = threading.local()


@contextmanager
def batch_rows(rows: np.ndarray, full: int):
    """Run a module on rows ``rows`` of a ``full``-row batch.

    Dropout inside the block draws its mask for the whole batch and keeps
    the selected rows, so a row subset sees exactly the masks it would see
    as part of the full batch.
    """
    prev = getattr(_ROWS, "value", None)
    _ROWS.value = (np.asarray(rows), int(full))
    try:
        yield
    finally:
        _ROWS.value = prev


class Dropout(Module):
    def __init__(self, rate: float, rng: np.random.Generator):
        super().__init__()
        self.rate = rate
        self.rng = rng

    def forward(self, x: Tensor) -> Tensor:
        ctx = getattr(_ROWS, "value", None)
        if ctx is None or not self.training or self.rate <= 0:
            return T.dropout(x, self.rate, self.rng if self.training else None)
        rows, full = ctx
        keep = (self.rng.random((full, *x.shape[1:])) >= self.rate)[rows]
        return x * Tensor._wrap(keep.astype(x.dtype) / x.dtype.type(1.0 - self.rate), False)


class MultiHeadSelfAttention(Module):
    def __init__(self, d: int, num_heads: int, rng: np.random.Generator, causal: bool = False):
        super().__init__()
        if d % num_heads:
            raise ValueError(f"hidden dim {d} not divisible by {num_heads} heads")
        self.d, self.h, self.causal = d, num_heads, causal
        self.qkv = Linear(d, 3 * d, rng)
        self.out = Linear(d, d, rng)

    def forward(self, x: Tensor, mask: np.ndarray) -> Tensor:
        b, s, d = x.shape
        h, dh = self.h, d // self.h
        qkv = self.qkv(x).reshape(b, s, 3, h, dh).transpose(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        scores = (q @ k.transpose(0, 1, 3, 2)) * (1.0 / np.sqrt(dh))
        keep = mask.astype(bool)[:, None, None, :]
        if self.causal:
            keep = keep & np.tril(np.ones((s, s), dtype=bool))[None, None]
            # a padded query row may see nothing under the causal mask; let it see itself
            keep = keep | np.eye(s, dtype=bool)[None, None]
        else:
            keep = np.broadcast_to(keep, (b, 1, s, s))
        att = T.softmax(scores, axis=-1, mask=keep)
        ctx = (att @ v).transpose(0, 2, 1, 3).reshape(b, s, d)
        return self.out(ctx)


class FeedForward(Module):
    def __init__(self, d: int, d_ff: int, rng: np.random.Generator):
        super().__init__()
        self.up = Linear(d, d_ff, rng)
        self.down = Linear(d_ff, d, rng)

    def forward(self, x: Tensor) -> Tensor:
        return self.down(T.gelu(self.up(x)))


class TransformerBlock(Module):
    """Pre-norm block: x + Attn(LN x), then + FFN(LN x)."""

    def __init__(self, d: int, num_heads: int, d_ff: int, rng: np.random.Generator,
                 causal: bool = False, dropout: float = 0.0):
        super().__init__()
        self.ln1 = LayerNorm(d)
        self.attn = MultiHeadSelfAttention(d, num_heads, rng, causal)
        self.ln2 = LayerNorm(d)
        self.ffn = FeedForward(d, d_ff, rng)
        self.drop = Dropout(dropout, rng)

    def forward(self, x: Tensor, mask: np.ndarray) -> Tensor:
        x = x + self.drop(self.attn(self.ln1(x), mask))
        return x + self.drop(self.ffn(self.ln2(x)))


class Tower(Module):
    """ReLU MLP ending in a single sigmoid unit."""

    def __init__(self, d_in: int, dims: tuple[int, ...], rng: np.random.Generator, dropout: float = 0.0):
        super().__init__()
        self.dims = tuple(dims)
        self.layers: list[Linear] = []
        prev = d_in
        for i, n in enumerate(self.dims):
            layer = Linear(prev, n, rng)
            setattr(self, f"hidden{i}", layer)
            self.layers.append(layer)
            prev = n
        self.head = Linear(prev, 1, rng)
        self.drop = Dropout(dropout, rng)

    def penultimate(self, x: Tensor) -> Tensor:
        for layer in self.layers:
            x = self.drop(T.relu(layer(x)))
        return x

    def forward(self, x: Tensor) -> Tensor:
        logit = self.head(self.penultimate(x))
        return T.sigmoid(logit.reshape(logit.shape[0]))
