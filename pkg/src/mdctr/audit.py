"""Gradient audits on a tiny model.

Two checks back the masked-loss derivation:

* decoupling: after one backward pass, every DSN whose domain has no sample
  in the batch holds an exactly-zero gradient, and backbone plus general
  head hold nonzero ones;
* finite differences: tape gradients of the full loss agree with central
  differences in 64-bit mode.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .backbone import BackboneConfig
from .checkpoint import section_of
from .dsn import DsnConfig
from .gradcheck import GradAudit, finite_diff_check
from .model import ModelConfig, MultiDomainModel
from .trainer import Batch, DomainRegistry, all_dsn_predictions, compute_loss, masked_loss, mask_matrix

TINY_DOMAINS = ("alpha", "beta", "gamma")


def tiny_model(seed: int = 0, vocab_size: int = 40, seq_len: int = 8, hidden_dim: int = 16,
               domains=TINY_DOMAINS, ladder_block: str = "transformer") -> MultiDomainModel:
    cfg = ModelConfig(
        backbone=BackboneConfig(vocab_size=vocab_size, num_layers=2, hidden_dim=hidden_dim, num_heads=2,
                                ffn_dim=2 * hidden_dim, max_seq_len=seq_len),
        dsn=DsnConfig("template", tap_frequency=1, ladder_dim=8, ladder_block=ladder_block, ladder_heads=2,
                      ladder_ffn_dim=16, gate_dim=8, tower_dims=(8, 4)),
        general_tower_dims=(8, 4),
        seed=seed,
    )
    return MultiDomainModel(cfg, list(domains))


def random_batch(rng: np.random.Generator, size: int, domains, vocab_size: int = 40, seq_len: int = 8,
                 domain_pool=None) -> Batch:
    """Random token ids with ragged padding; domains drawn from ``domain_pool``."""
    pool = list(domain_pool if domain_pool is not None else domains)
    ids = rng.integers(4, vocab_size, size=(size, seq_len))
    lengths = rng.integers(2, seq_len + 1, size=size)
    mask = (np.arange(seq_len)[None, :] < lengths[:, None]).astype(np.int8)
    ids = np.where(mask == 1, ids, 0)
    labels = rng.integers(0, 2, size=size)
    doms = np.array([pool[i] for i in rng.integers(len(pool), size=size)], dtype=object)
    return Batch(ids.astype(np.int64), mask, labels.astype(np.int64), doms)


@dataclass
class DecouplingReport:
    present: list[str]
    nonzero_groups: list[str]
    violations: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations


def group_gradients(model: MultiDomainModel, batch: Batch, strict: bool,
                    corrupt_mask: bool = False) -> dict[str, dict[str, np.ndarray]]:
    """Gradients of the training loss, grouped by checkpoint section.

    ``corrupt_mask`` is a negative-control hook: it rotates every sample's
    mask one domain to the right, so DSNs of absent domains receive loss.
    """
    params = dict(model.named_parameters())
    with T.tape() as tp:
        if corrupt_mask:
            reg = DomainRegistry.of(model)
            taps = model.taps(batch.ids, batch.mask)
            gen = model.general(taps.last, batch.mask)
            preds = all_dsn_predictions(model, taps)
            masks = np.roll(mask_matrix(batch.domains, reg), 1, axis=1)
            loss, _, _ = masked_loss(preds, gen, batch.labels, masks)
        else:
            loss = compute_loss(model, batch, strict)[0]
        grads = tp.backward(loss, list(params.values()))
    out: dict[str, dict[str, np.ndarray]] = {}
    for k, p in params.items():
        out.setdefault(section_of(k), {})[k] = grads[p.node_id]
    return out


def check_decoupling(model: MultiDomainModel, batch: Batch, strict: bool = False,
                     corrupt_mask: bool = False) -> DecouplingReport:
    grads = group_gradients(model, batch, strict, corrupt_mask)
    present = sorted(set(batch.domains.tolist()))
    nonzero = sorted(g for g, gs in grads.items() if any(np.any(a != 0) for a in gs.values()))
    rep = DecouplingReport(present, nonzero)
    for name in model.domains:
        group = model.group_of(name)
        if name not in present and group in nonzero:
            rep.violations.append(f"{group} received gradient with no {name!r} sample in the batch")
    for group in ("backbone", "general"):
        if group not in nonzero:
            rep.violations.append(f"{group} received no gradient")
    return rep


def finite_difference_audit(model: MultiDomainModel, batch: Batch, groups=None,
                            max_entries: int | None = 12, seed: int = 0) -> tuple[GradAudit, dict[str, float]]:
    """Central-difference audit of the full loss; returns (audit, max rel. error per group)."""
    params = {k: p for k, p in model.named_parameters() if groups is None or section_of(k) in groups}
    audit = finite_diff_check(lambda: compute_loss(model, batch, True)[0], params,
                              max_entries=max_entries, seed=seed)
    per_group: dict[str, float] = {}
    for k, err in audit.max_rel_error.items():
        g = section_of(k)
        per_group[g] = max(per_group.get(g, 0.0), err)
    return audit, per_group
