"""Dense tensors with a reverse-mode differentiation tape.

Every differentiable primitive is recorded on the active :class:`Tape` as a
node holding its inputs, its output and a local-gradient rule.  Nodes are
appended in execution order, so the tape is topologically sorted by
construction and ``backward`` walks it in reverse.

Only tensors with ``requires_grad`` cause recording; frozen parameters and
plain inputs run as pure numpy.
"""
from __future__ import annotations

import contextlib
import itertools
import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, Iterator, Sequence

import numpy as np
from scipy import sparse


class DimensionError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class ContractError(RuntimeError):
    """A precondition of a tape operation was violated."""


class NumericalError(ArithmeticError):
    """NaN or Inf surfaced where finite values are required."""


_DTYPES = {32: np.float32, 64: np.float64}
_state = threading.local()
_ids = itertools.count()


def _get(name, default):
    return getattr(_state, name, default)


def default_dtype() -> np.dtype:
    return np.dtype(_DTYPES[_get("bits", 32)])


def set_precision(bits: int) -> None:
    if bits not in _DTYPES:
        raise ValueError(f"precision must be 32 or 64, got {bits}")
    _state.bits = bits


@contextlib.contextmanager
def precision(bits: int) -> Iterator[None]:
    """Temporarily switch the default float width for new tensors."""
    prev = _get("bits", 32)
    set_precision(bits)
    try:
        yield
    finally:
        _state.bits = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "node_id", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data)
        if arr.dtype != default_dtype() or not arr.flags.c_contiguous:
            arr = np.ascontiguousarray(arr, dtype=default_dtype())
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name
        self.node_id = next(_ids)

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad: bool) -> "Tensor":
        # internal fast path: keeps the op's result dtype untouched
        t = cls.__new__(cls)
        t.data = arr
        t.requires_grad = requires_grad
        t.grad = None
        t.name = None
        t.node_id = next(_ids)
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_scalar(self)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return take(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def _raise_scalar(t: Tensor):
    raise ContractError(f"item() requires a single-element tensor, got shape {t.shape}")


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------------------
# tape


@dataclass
class Node:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    forward: Callable[..., np.ndarray]
    backward: Callable[..., tuple]


@dataclass
class Tape:
    """Ordered record of executed operations.

    Append order is execution order, which is a valid topological order of
    the computation graph.
    """

    nodes: list[Node] = field(default_factory=list)

    def record(self, node: Node) -> None:
        self.nodes.append(node)

    def __len__(self) -> int:
        return len(self.nodes)

    def backward(self, loss: Tensor, wrt: Iterable[Tensor] | None = None) -> dict[int, np.ndarray]:
        """Reverse-mode sweep from a scalar ``loss``.

        Returns a map ``node_id -> gradient``.  Every tensor in ``wrt`` gets an
        entry (and its ``.grad`` set); tensors the loss does not reach get an
        exact zero array.
        """
        if loss.data.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
        wrt = list(wrt) if wrt is not None else None
        keep = {t.node_id for t in wrt} if wrt is not None else None
        grads: dict[int, np.ndarray] = {loss.node_id: np.ones_like(loss.data)}
        for node in reversed(self.nodes):
            oid = node.output.node_id
            g = grads.get(oid) if keep is None or oid in keep else grads.pop(oid, None)
            if g is None:
                continue
            in_grads = node.backward(g, node.output.data, *(t.data for t in node.inputs))
            for t, gi in zip(node.inputs, in_grads):
                if gi is None or not t.requires_grad:
                    continue
                prev = grads.get(t.node_id)
                grads[t.node_id] = gi if prev is None else prev + gi
        out: dict[int, np.ndarray] = {}
        if wrt is None:
            return grads
        for t in wrt:
            g = grads.get(t.node_id)
            if g is None:
                g = np.zeros_like(t.data)
            t.grad = g
            out[t.node_id] = g
        return out

    def replay(self) -> list[np.ndarray]:
        """Re-run every recorded forward rule from current leaf values."""
        values: dict[int, np.ndarray] = {}
        outs = []
        for node in self.nodes:
            args = [values.get(t.node_id, t.data) for t in node.inputs]
            res = node.forward(*args)
            values[node.output.node_id] = res
            outs.append(res)
        return outs

    def verify_replay(self) -> bool:
        outs = self.replay()
        return all(
            o.dtype == n.output.data.dtype and np.array_equal(o, n.output.data, equal_nan=True)
            for o, n in zip(outs, self.nodes)
        )


def _stack() -> list[Tape]:
    st = _get("tapes", None)
    if st is None:
        st = []
        _state.tapes = st
    return st


def active_tape() -> Tape | None:
    st = _stack()
    return st[-1] if st else None


@contextlib.contextmanager
def tape() -> Iterator[Tape]:
    """Open a fresh tape for the current thread."""
    t = Tape()
    _stack().append(t)
    try:
        yield t
    finally:
        _stack().pop()


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    st = _stack()
    saved = list(st)
    st.clear()
    try:
        yield
    finally:
        st.extend(saved)


def backward(loss: Tensor, params: Iterable[Tensor] | None = None, tape_: Tape | None = None):
    """Backpropagate ``loss`` on the active (or given) tape."""
    t = tape_ or active_tape()
    if t is None:
        raise ContractError("backward called with no active tape")
    return t.backward(loss, params)


def _apply(op: str, fwd: Callable[..., np.ndarray], bwd: Callable[..., tuple], *inputs: Tensor) -> Tensor:
    arr = fwd(*(t.data for t in inputs))
    needs = any(t.requires_grad for t in inputs)
    t_active = active_tape() if needs else None
    out = Tensor._wrap(arr, t_active is not None)
    if t_active is not None:
        t_active.record(Node(op, inputs, out, fwd, bwd))
    return out


# ---------------------------------------------------------------------------
# broadcasting helpers


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: cannot broadcast shapes {a.shape} and {b.shape}") from None


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    if lead:
        g = g.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _coerce(a, b):
    if not isinstance(a, Tensor):
        a = Tensor(np.asarray(a, dtype=b.dtype if isinstance(b, Tensor) else None))
    if not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=a.dtype))
    return a, b


# ---------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a, b = _coerce(a, b)
    _broadcast_shape(a, b, "add")
    sa, sb = a.shape, b.shape
    return _apply(
        "add",
        np.add,
        lambda g, out, x, y: (_unbroadcast(g, sa), _unbroadcast(g, sb)),
        a,
        b,
    )


def sub(a, b) -> Tensor:
    a, b = _coerce(a, b)
    _broadcast_shape(a, b, "sub")
    sa, sb = a.shape, b.shape
    return _apply(
        "sub",
        np.subtract,
        lambda g, out, x, y: (_unbroadcast(g, sa), _unbroadcast(-g, sb)),
        a,
        b,
    )


def mul(a, b) -> Tensor:
    a, b = _coerce(a, b)
    _broadcast_shape(a, b, "mul")
    sa, sb = a.shape, b.shape
    return _apply(
        "mul",
        np.multiply,
        lambda g, out, x, y: (_unbroadcast(g * y, sa), _unbroadcast(g * x, sb)),
        a,
        b,
    )


def div(a, b) -> Tensor:
    a, b = _coerce(a, b)
    _broadcast_shape(a, b, "div")
    sa, sb = a.shape, b.shape
    return _apply(
        "div",
        np.divide,
        lambda g, out, x, y: (_unbroadcast(g / y, sa), _unbroadcast(-g * out / y, sb)),
        a,
        b,
    )


def tanh(x: Tensor) -> Tensor:
    return _apply("tanh", np.tanh, lambda g, out, a: (g * (1 - out * out),), as_tensor(x))


def _sigmoid(a: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(a)
    pos = a >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-a[pos]))
    e = np.exp(a[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def sigmoid(x: Tensor) -> Tensor:
    return _apply("sigmoid", _sigmoid, lambda g, out, a: (g * out * (1 - out),), as_tensor(x))


def relu(x: Tensor) -> Tensor:
    return _apply(
        "relu",
        lambda a: np.maximum(a, 0),
        lambda g, out, a: (g * (a > 0),),
        as_tensor(x),
    )


_GELU_C = np.sqrt(2.0 / np.pi)


def _gelu(a):
    c = a.dtype.type(_GELU_C)
    # a*a*a rather than a**3: float32 pow is ~80x slower than two multiplies
    return 0.5 * a * (1.0 + np.tanh(c * a * (1.0 + 0.044715 * a * a)))


def _gelu_grad(g, out, a):
    c = a.dtype.type(_GELU_C)
    a2 = a * a
    t = np.tanh(c * a * (1.0 + 0.044715 * a2))
    d = 0.5 * (1.0 + t) + 0.5 * a * (1.0 - t * t) * c * (1.0 + 3 * 0.044715 * a2)
    return (g * d,)


def gelu(x: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    return _apply("gelu", _gelu, _gelu_grad, as_tensor(x))


def exp(x: Tensor) -> Tensor:
    return _apply("exp", np.exp, lambda g, out, a: (g * out,), as_tensor(x))


def log(x: Tensor) -> Tensor:
    return _apply("log", np.log, lambda g, out, a: (g / a,), as_tensor(x))


# ---------------------------------------------------------------------------
# linear algebra and shape ops


def matmul(a, b) -> Tensor:
    """Matrix product with numpy batching semantics over leading axes."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs operands of rank >= 2, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: inner extents differ, {a.shape} @ {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise DimensionError(f"matmul: batch axes incompatible, {a.shape} @ {b.shape}") from None
    sa, sb = a.shape, b.shape

    def bwd(g, out, x, y):
        ga = _unbroadcast(g @ np.swapaxes(y, -1, -2), sa)
        gb = _unbroadcast(np.swapaxes(x, -1, -2) @ g, sb)
        return ga, gb

    return _apply("matmul", np.matmul, bwd, a, b)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    shape = tuple(shape)
    src = x.shape
    return _apply(
        "reshape",
        lambda a: a.reshape(shape),
        lambda g, out, a: (g.reshape(src),),
        x,
    )


def transpose(x: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    x = as_tensor(x)
    axes = tuple(axes) if axes is not None else tuple(reversed(range(x.ndim)))
    inv = tuple(np.argsort(axes))
    return _apply(
        "transpose",
        lambda a: np.ascontiguousarray(np.transpose(a, axes)),
        lambda g, out, a: (np.transpose(g, inv),),
        x,
    )


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    src = x.shape

    def bwd(g, out, a):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, src).copy(),)

    return _apply("sum", lambda a: np.asarray(a.sum(axis=axis, keepdims=keepdims)), bwd, x)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    n = x.data.size if axis is None else int(np.prod([x.shape[i] for i in np.atleast_1d(axis)]))
    return div(tsum(x, axis, keepdims), float(n))


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = tuple(as_tensor(x) for x in xs)
    ax = axis % xs[0].ndim
    for x in xs[1:]:
        if x.ndim != xs[0].ndim or any(
            x.shape[i] != xs[0].shape[i] for i in range(x.ndim) if i != ax
        ):
            raise DimensionError(f"concat along axis {axis}: shapes {[t.shape for t in xs]}")
    bounds = np.cumsum([x.shape[ax] for x in xs])[:-1]

    def bwd(g, out, *args):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, bounds, axis=ax))

    return _apply("concat", lambda *arrs: np.concatenate(arrs, axis=ax), bwd, *xs)


def take(x: Tensor, index) -> Tensor:
    """Numpy-style indexing; fancy indices scatter-add on the way back."""
    x = as_tensor(x)
    src = x.shape

    scatter_add = not _is_injective(index)

    def bwd(g, out, a):
        full = np.zeros(src, dtype=g.dtype)
        if scatter_add:
            np.add.at(full, index, g)
        else:
            full[index] = g
        return (full,)

    return _apply("take", lambda a: np.ascontiguousarray(a[index]), bwd, x)


def _is_injective(index) -> bool:
    """True when no element of the source is selected twice, so the backward
    pass may assign instead of scatter-adding."""
    parts = index if isinstance(index, tuple) else (index,)
    arrays = 0
    for p in parts:
        if p is None or p is Ellipsis or isinstance(p, (int, np.integer, slice)):
            continue
        arr = np.asarray(p)
        if arr.dtype == bool:
            continue
        arrays += 1
        if arrays > 1 or np.unique(arr).size != arr.size:
            return False
    return True


def embedding(weight: Tensor, ids: np.ndarray) -> Tensor:
    """Row lookup ``weight[ids]`` for an integer id array of any shape."""
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= weight.shape[0]):
        raise IndexError(f"token id out of range [0, {weight.shape[0]}): min={ids.min()} max={ids.max()}")
    flat = ids.reshape(-1)
    n, d = weight.shape

    def bwd(g, out, w):
        # sparse scatter matrix is far faster than np.add.at for repeated rows
        scatter = sparse.csr_matrix(
            (np.ones(flat.size, dtype=g.dtype), (flat, np.arange(flat.size))), shape=(n, flat.size)
        )
        return (np.asarray(scatter @ g.reshape(-1, d), dtype=g.dtype),)

    return _apply("embedding", lambda w: w[ids], bwd, weight)


# ---------------------------------------------------------------------------
# normalisation, attention pieces, losses


def softmax(x: Tensor, axis: int = -1, mask: np.ndarray | None = None) -> Tensor:
    """Max-shifted softmax.  ``mask`` (broadcastable, truthy = keep) zeroes
    excluded entries exactly; a slice with nothing kept is an error."""
    x = as_tensor(x)
    if not -x.ndim <= axis < x.ndim:
        raise DimensionError(f"softmax axis {axis} out of range for shape {x.shape}")
    keep = None
    if mask is not None:
        keep = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
        if not keep.any(axis=axis).all():
            raise ContractError("softmax: every position masked in at least one slice")

    def fwd(a):
        if keep is not None:
            a = np.where(keep, a, -np.inf)
        z = a - a.max(axis=axis, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=axis, keepdims=True)

    def bwd(g, out, a):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _apply("softmax", fwd, bwd, x)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError(f"layer_norm: gain/bias {gain.shape}/{bias.shape} vs last axis {d}")

    def normalise(a):
        mu = a.mean(axis=-1, keepdims=True)
        xc = a - mu
        var = (xc * xc).mean(axis=-1, keepdims=True)
        inv = 1.0 / np.sqrt(var + a.dtype.type(eps))
        return xc * inv, inv

    def fwd(a, gm, bt):
        xhat, _ = normalise(a)
        return xhat * gm + bt

    def bwd(g, out, a, gm, bt):
        xhat, inv = normalise(a)
        lead = tuple(range(a.ndim - 1))
        ggain = (g * xhat).sum(axis=lead)
        gbias = g.sum(axis=lead)
        gx = g * gm
        gxa = inv * (gx - gx.mean(axis=-1, keepdims=True) - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
        return gxa, ggain, gbias

    return _apply("layer_norm", fwd, bwd, x, gain, bias)


BCE_EPS = 1e-7


def bce_loss(pred: Tensor, label, reduction: str = "mean", eps: float = BCE_EPS) -> Tensor:
    """Binary cross-entropy on probabilities clamped to ``[eps, 1 - eps]``."""
    pred = as_tensor(pred)
    y = np.asarray(label.data if isinstance(label, Tensor) else label)
    if y.shape != pred.shape:
        raise DimensionError(f"bce_loss: labels {y.shape} vs predictions {pred.shape}")
    if not np.isin(y, (0, 1)).all():
        raise ValueError("bce_loss: labels must be 0 or 1")
    y = y.astype(pred.dtype)
    n = max(pred.data.size, 1)
    lo, hi = eps, 1.0 - eps

    def per_sample(p):
        pc = np.clip(p, lo, hi)
        return -(y * np.log(pc) + (1 - y) * np.log(1 - pc))

    if reduction == "none":
        def bwd_none(g, out, p):
            pc = np.clip(p, lo, hi)
            inside = (p >= lo) & (p <= hi)
            return (g * -(y / pc - (1 - y) / (1 - pc)) * inside,)

        return _apply("bce", per_sample, bwd_none, pred)
    if reduction != "mean":
        raise ValueError(f"unknown reduction {reduction!r}")

    def bwd(g, out, p):
        pc = np.clip(p, lo, hi)
        inside = (p >= lo) & (p <= hi)
        return (g * -(y / pc - (1 - y) / (1 - pc)) * inside / n,)

    return _apply("bce", lambda p: np.asarray(per_sample(p).mean(), dtype=p.dtype), bwd, pred)


def dropout(x: Tensor, rate: float, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout; identity when ``rate`` is 0 or no generator is given."""
    if rate <= 0 or rng is None:
        return x
    keep = (rng.random(x.shape) >= rate).astype(x.dtype) / x.dtype.type(1.0 - rate)
    return mul(x, Tensor._wrap(keep, False))
