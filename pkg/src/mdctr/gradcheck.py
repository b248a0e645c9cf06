"""Central-difference audit of tape gradients."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import tensor as T
from .nn import Parameter


class AuditFailure(AssertionError):
    pass


@dataclass
class GradAudit:
    max_rel_error: dict[str, float] = field(default_factory=dict)
    checked: dict[str, int] = field(default_factory=dict)

    @property
    def worst(self) -> float:
        return max(self.max_rel_error.values(), default=0.0)

    def passed(self, tol: float) -> bool:
        return self.worst < tol


def rel_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> np.ndarray:
    return np.abs(analytic - numeric) / np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)


def finite_diff_check(
    f: Callable[[], T.Tensor],
    params: dict[str, Parameter],
    step: float = 1e-4,
    max_entries: int | None = None,
    seed: int = 0,
    abs_floor: float = 1e-7,
) -> GradAudit:
    """Compare reverse-mode gradients of scalar ``f()`` with central differences.

    Runs in the precision of the parameters (64-bit is expected).  With
    ``max_entries`` only a seeded random subset of each parameter is probed.
    Entries where both gradients are below ``abs_floor`` count as agreeing:
    the relative error of two values that are zero up to rounding is noise.
    """
    with T.tape() as tp:
        loss = f()
        grads = tp.backward(loss, list(params.values()))
    base = float(loss.data)
    with T.no_grad():
        again = float(f().data)
    if again != base:
        raise AuditFailure(f"non-deterministic program: {base!r} != {again!r}")

    rng = np.random.default_rng(seed)
    audit = GradAudit()
    for name, p in params.items():
        g = grads[p.node_id].reshape(-1)
        flat = p.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = np.sort(rng.choice(flat.size, size=max_entries, replace=False))
        worst = 0.0
        with T.no_grad():
            for i in idx:
                old = flat[i]
                flat[i] = old + step
                up = float(f().data)
                flat[i] = old - step
                down = float(f().data)
                flat[i] = old
                num = (up - down) / (2 * step)
                if max(abs(num), abs(g[i])) < abs_floor:
                    continue
                worst = max(worst, float(rel_error(np.float64(g[i]), np.float64(num))))
        audit.max_rel_error[name] = worst
        audit.checked[name] = int(idx.size)
    return audit
