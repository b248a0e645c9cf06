"""Masked multi-domain training.

Each sample carries a one-hot domain mask over the registered domains.  The
domain loss keeps only the sample's own DSN prediction, the general head is
trained on every sample, and the total is their sum.  Because the mask
multiplies a DSN's loss by an exact zero (or, in dispatch mode, the DSN is
never run on the sample), DSNs of domains absent from a batch get exactly
zero gradient.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .checkpoint import section_of
from .data import TRAIN, VALID, Dataset
from .errors import RegistryError, UndefinedMetricError, ValidationError
from .metrics import auc
from .model import MultiDomainModel
from .nn import Dropout
from .optim import SGD, AdamW, CyclicLR
from .prompt import Vocabulary, encode
from .tensor import NumericalError, Tensor

PUBLISHED_LR_BOUNDS = (1e-6, 8e-5)


@dataclass
class TrainConfig:
    batch_size: int = 128
    epochs: int = 4
    lr_low: float = 2e-4
    lr_high: float = 2e-3
    cycle_epochs: float = 4.0
    seed: int = 0
    dropout: float = 0.1
    weight_decay: float = 0.01
    optimizer: str = "adamw"
    general_weight: float = 1.0
    strict_mask: bool = False
    prompt_mode: str = "full"
    eval_batch_size: int = 512
    freeze: tuple[str, ...] = ()

    def validate(self) -> None:
        if not 0 < self.lr_low <= self.lr_high:
            raise ValidationError(f"learning-rate bounds must satisfy 0 < low <= high, got [{self.lr_low}, {self.lr_high}]")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValidationError("batch_size must be positive and epochs non-negative")
        if self.optimizer not in ("adamw", "sgd"):
            raise ValidationError(f"optimizer must be 'adamw' or 'sgd', got {self.optimizer!r}")
        if not 0 <= self.dropout < 1:
            raise ValidationError(f"dropout must lie in [0, 1), got {self.dropout}")


# ---------------------------------------------------------------------------
# registry and masks


@dataclass(frozen=True)
class DomainRegistry:
    names: tuple[str, ...]

    @classmethod
    def of(cls, model: MultiDomainModel) -> "DomainRegistry":
        return cls(tuple(model.domains))

    def __len__(self) -> int:
        return len(self.names)

    def __contains__(self, name: str) -> bool:
        return name in self.names

    def index(self, name: str) -> int:
        """1-based index in registration order."""
        if name not in self.names:
            raise RegistryError(f"domain {name!r} is not registered")
        return self.names.index(name) + 1

    def positions(self, domains) -> np.ndarray:
        """0-based column per sample, -1 for unknown domains."""
        lookup = {n: i for i, n in enumerate(self.names)}
        return np.array([lookup.get(d, -1) for d in domains], dtype=np.int64)


def build_mask(domain_name: str, registry: DomainRegistry) -> np.ndarray:
    """[I(d_1 = d), ..., I(d_M = d)]; all zeros for an unregistered domain."""
    return np.array([1 if n == domain_name else 0 for n in registry.names], dtype=np.int8)


def mask_matrix(domains, registry: DomainRegistry) -> np.ndarray:
    pos = registry.positions(domains)
    out = np.zeros((len(pos), len(registry)), dtype=np.int8)
    known = pos >= 0
    out[np.flatnonzero(known), pos[known]] = 1
    return out


# ---------------------------------------------------------------------------
# batches


@dataclass
class Batch:
    ids: np.ndarray
    mask: np.ndarray
    labels: np.ndarray
    domains: np.ndarray

    def __len__(self) -> int:
        return len(self.labels)

    def rows(self, idx) -> "Batch":
        return Batch(self.ids[idx], self.mask[idx], self.labels[idx], self.domains[idx])

    def fingerprint(self) -> str:
        h = hashlib.sha256(self.ids.tobytes())
        h.update(self.labels.tobytes())
        return h.hexdigest()[:16]


def encode_dataset(ds: Dataset, vocab: Vocabulary, max_seq_len: int, mode: str = "full") -> Batch:
    ids, mask = encode(ds.records, vocab, max_seq_len, mode)
    return Batch(ids, mask, ds.labels, ds.domain_array())


# ---------------------------------------------------------------------------
# prediction and losses


def all_dsn_predictions(model: MultiDomainModel, taps) -> Tensor:
    b = taps.mask.shape[0]
    return T.concat([dsn(taps).reshape(b, 1) for dsn in model.dsns.values()], axis=1)


def predict(model: MultiDomainModel, batch: Batch, strict: bool = False,
            force_general: bool = False, batch_size: int = 512) -> np.ndarray:
    """Routed prediction: own-domain DSN for known domains, general head otherwise.

    ``strict`` evaluates every DSN and selects with the mask (masked sum);
    otherwise each DSN only runs on its own samples.
    """
    reg = DomainRegistry.of(model)
    out = np.empty(len(batch), dtype=np.float64)
    with T.no_grad():
        for start in range(0, len(batch), batch_size):
            sub = batch.rows(slice(start, start + batch_size))
            taps = model.taps(sub.ids, sub.mask)
            y = model.general(taps.last, sub.mask).data.copy()
            pos = reg.positions(sub.domains)
            if not force_general and len(reg) and (pos >= 0).any():
                if strict:
                    preds = all_dsn_predictions(model, taps).data
                    masks = mask_matrix(sub.domains, reg).astype(preds.dtype)
                    routed = (masks * preds).sum(axis=1)
                    known = pos >= 0
                    y[known] = routed[known]
                else:
                    for m, dsn in enumerate(model.dsns.values()):
                        rows = np.flatnonzero(pos == m)
                        if rows.size:
                            y[rows] = dsn(taps.select(rows) if rows.size < len(sub) else taps).data
            out[start:start + len(sub)] = y
    return out


def masked_loss(dsn_preds: Tensor, general_preds: Tensor, labels: np.ndarray, masks: np.ndarray,
                general_weight: float = 1.0) -> tuple[Tensor, Tensor, Tensor]:
    """(L, L^D, L^G) from all-DSN predictions (batch x M) and per-sample masks."""
    masks = np.asarray(masks)
    if masks.shape != dsn_preds.shape:
        raise T.DimensionError(f"masks {masks.shape} vs DSN predictions {dsn_preds.shape}")
    if not (masks.sum(axis=1) == 1).all():
        raise ValidationError("every training sample must belong to exactly one registered domain")
    b = len(labels)
    y = np.broadcast_to(np.asarray(labels)[:, None], dsn_preds.shape)
    per = T.bce_loss(dsn_preds, y, reduction="none")
    loss_d = (per * Tensor._wrap(masks.astype(per.dtype), False)).sum() / float(b)
    loss_g = T.bce_loss(general_preds, labels)
    return loss_d + loss_g * general_weight, loss_d, loss_g


def dispatch_loss(model: MultiDomainModel, taps, labels: np.ndarray, positions: np.ndarray,
                  general_preds: Tensor, general_weight: float = 1.0) -> tuple[Tensor, Tensor, Tensor, dict]:
    """Same value as :func:`masked_loss` but runs each DSN on its own rows only."""
    if (positions < 0).any():
        raise ValidationError("every training sample must belong to exactly one registered domain")
    b = len(labels)
    total = None
    per_domain = {}
    for m, dsn in enumerate(model.dsns.values()):
        rows = np.flatnonzero(positions == m)
        if not rows.size:
            continue
        sub = taps if rows.size == b else taps.select(rows)
        part = T.bce_loss(dsn(sub), labels[rows], reduction="none").sum()
        per_domain[dsn.name] = (float(part.data), int(rows.size))
        total = part if total is None else total + part
    loss_d = total / float(b)
    loss_g = T.bce_loss(general_preds, labels)
    return loss_d + loss_g * general_weight, loss_d, loss_g, per_domain


# ---------------------------------------------------------------------------
# training


@dataclass
class StepRecord:
    step: int
    loss: float
    loss_domain: float
    loss_general: float
    lr: float
    domains: list[str]
    updated_groups: list[str]
    per_domain: dict[str, tuple[float, int]] = field(default_factory=dict)


def make_optimizer(model: MultiDomainModel, cfg: TrainConfig):
    params = model.trainable()
    if cfg.optimizer == "sgd":
        return SGD(params, cfg.lr_high, cfg.weight_decay)
    return AdamW(params, cfg.lr_high, weight_decay=cfg.weight_decay)


def compute_loss(model: MultiDomainModel, batch: Batch, strict: bool, general_weight: float = 1.0):
    reg = DomainRegistry.of(model)
    taps = model.taps(batch.ids, batch.mask)
    gen = model.general(taps.last, batch.mask)
    if strict:
        preds = all_dsn_predictions(model, taps)
        masks = mask_matrix(batch.domains, reg)
        loss, ld, lg = masked_loss(preds, gen, batch.labels, masks, general_weight)
        per = T.bce_loss(Tensor._wrap(preds.data, False), np.broadcast_to(batch.labels[:, None], preds.shape),
                         reduction="none").data
        per_domain = {}
        for m, name in enumerate(reg.names):
            sel = masks[:, m] == 1
            if sel.any():
                per_domain[name] = (float(per[sel, m].sum()), int(sel.sum()))
        return loss, ld, lg, per_domain
    return dispatch_loss(model, taps, batch.labels, reg.positions(batch.domains), gen, general_weight)


def train_step(model: MultiDomainModel, batch: Batch, optimizer, cfg: TrainConfig, step: int = 0) -> StepRecord:
    params = optimizer.params
    reseed_dropout(model, cfg.seed, step)
    with T.tape() as tp:
        loss, ld, lg, per_domain = compute_loss(model, batch, cfg.strict_mask, cfg.general_weight)
        if not np.isfinite(loss.data):
            raise NumericalError(f"non-finite loss on batch {batch.fingerprint()}")
        grads = tp.backward(loss, params.values())
    named = {k: grads[p.node_id] for k, p in params.items()}
    updated = sorted({section_of(k) for k, g in named.items() if np.any(g != 0)})
    optimizer.step(named)
    return StepRecord(
        step=step,
        loss=float(loss.data),
        loss_domain=float(ld.data),
        loss_general=float(lg.data),
        lr=float(optimizer.state.lr),
        domains=sorted(set(batch.domains.tolist())),
        updated_groups=updated,
        per_domain=per_domain,
    )


@dataclass
class TrainReport:
    rows: list[dict] = field(default_factory=list)
    audit: list[StepRecord] = field(default_factory=list)
    best_epoch: int = -1
    best_score: float = float("-inf")
    extra: dict = field(default_factory=dict)

    def add(self, epoch: int, domain: str, split: str, metric: str, value: float) -> None:
        self.rows.append({"epoch": epoch, "domain": domain, "split": split, "metric": metric, "value": value})

    def series(self, metric: str, split: str, domain: str) -> list[float]:
        return [r["value"] for r in self.rows
                if r["metric"] == metric and r["split"] == split and r["domain"] == domain]

    def auc_series(self, split: str = "valid") -> dict[str, list[float]]:
        out: dict[str, list[float]] = {}
        for r in self.rows:
            if r["metric"] == "auc" and r["split"] == split and r["domain"] != "*general*":
                out.setdefault(r["domain"], []).append(r["value"])
        return out

    def write_jsonl(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for r in self.rows:
                fh.write(json.dumps(r) + "\n")

    def write_audit(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for rec in self.audit:
                fh.write(json.dumps(asdict(rec)) + "\n")


def set_dropout(model, rate: float) -> None:
    for m in model.modules():
        if isinstance(m, Dropout):
            m.rate = rate


def reseed_dropout(model, seed: int, step: int) -> None:
    """Per-step, per-module dropout generators.

    Masks then depend only on (seed, step, module), not on how many draws
    other modules made, which keeps strict and dispatch modes in lockstep.
    """
    for i, m in enumerate(x for x in model.modules() if isinstance(x, Dropout)):
        m.rng = np.random.default_rng([seed, step, i])


def evaluate(model: MultiDomainModel, batch: Batch, strict: bool = False,
             force_general: bool = False, batch_size: int = 512) -> dict[str, float]:
    """Per-domain AUC; domains whose slice has a single class are skipped."""
    scores = predict(model, batch, strict=strict, force_general=force_general, batch_size=batch_size)
    out = {}
    for d in dict.fromkeys(batch.domains.tolist()):
        sel = batch.domains == d
        try:
            out[d] = auc(scores[sel], batch.labels[sel])
        except UndefinedMetricError:
            continue
    return out


def fit(model: MultiDomainModel, dataset: Dataset, cfg: TrainConfig, vocab: Vocabulary,
        report: TrainReport | None = None) -> TrainReport:
    """Seeded mini-batch training with per-epoch validation; keeps the best epoch."""
    cfg.validate()
    report = report or TrainReport()
    train_ds, valid_ds = dataset.subset(TRAIN), dataset.subset(VALID)
    if not len(train_ds) or not len(valid_ds):
        raise ValidationError("training needs non-empty train and valid splits")
    unknown = set(train_ds.domains) - set(model.domains)
    if unknown:
        raise RegistryError(f"training data contains unregistered domains {sorted(unknown)}")
    for g in cfg.freeze:
        model.freeze(g)
    seq = model.cfg.backbone.max_seq_len
    train = encode_dataset(train_ds, vocab, seq, cfg.prompt_mode)
    valid = encode_dataset(valid_ds, vocab, seq, cfg.prompt_mode)
    set_dropout(model, cfg.dropout)
    opt = make_optimizer(model, cfg)
    n = len(train)
    steps_per_epoch = -(-n // cfg.batch_size)
    sched = CyclicLR(cfg.lr_low, cfg.lr_high, max(2, int(round(cfg.cycle_epochs * steps_per_epoch))))
    rng = np.random.default_rng(cfg.seed)
    best_state = None
    step = 0
    for epoch in range(cfg.epochs):
        model.train()
        perm = rng.permutation(n)
        sums: dict[str, list[float]] = {}
        for start in range(0, n, cfg.batch_size):
            opt.state.lr = sched(step)
            rec = train_step(model, train.rows(perm[start:start + cfg.batch_size]), opt, cfg, step)
            report.audit.append(rec)
            for d, (s, c) in rec.per_domain.items():
                acc = sums.setdefault(d, [0.0, 0])
                acc[0] += s
                acc[1] += c
            step += 1
        model.eval()
        for d, (s, c) in sums.items():
            report.add(epoch, d, "train", "loss", s / c)
        aucs = evaluate(model, valid, cfg.strict_mask, batch_size=cfg.eval_batch_size)
        for d, a in aucs.items():
            report.add(epoch, d, "valid", "auc", a)
        gen = evaluate(model, valid, force_general=True, batch_size=cfg.eval_batch_size)
        if gen:
            report.add(epoch, "*general*", "valid", "auc", float(np.mean(list(gen.values()))))
        score = float(np.mean(list(aucs.values()))) if aucs else float("-inf")
        if score > report.best_score:
            report.best_score, report.best_epoch = score, epoch
            best_state = {k: p.data.copy() for k, p in model.trainable().items()}
    model.eval()
    if best_state is not None:
        params = dict(model.named_parameters())
        for k, arr in best_state.items():
            params[k].data = arr
    return report


def extend_domain(model: MultiDomainModel, new_data: Dataset, cfg: TrainConfig, vocab: Vocabulary) -> TrainReport:
    """Freeze everything, attach one new DSN, train only it."""
    names = new_data.domains
    if len(names) != 1:
        raise ValidationError(f"extension data must hold exactly one domain, got {names}")
    name = names[0]
    if name in model.domains:
        raise RegistryError(f"domain {name!r} is already registered")
    for g in list(model.groups()):
        model.freeze(g)
    before = model.checksums()
    model.attach(model.new_dsn(name))
    report = fit(model, new_data, cfg, vocab)
    after = model.checksums()
    changed = sorted(g for g in before if before[g] != after[g])
    report.extra.update(domain=name, frozen_checksums=before, changed_groups=changed)
    if changed:
        raise RuntimeError(f"frozen parameter groups changed during extension: {changed}")
    return report
