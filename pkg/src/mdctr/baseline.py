"""Shared-bottom baseline over one-hot categorical features.

Every categorical field (domain, user, item, brand) is looked up in its own
embedding table; looking up a one-hot index is the same as multiplying the
one-hot vector by the table.  The concatenated embeddings pass through a
shared MLP and one linear head per domain.  No text is consumed.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .data import TRAIN, VALID, Dataset
from .errors import RegistryError, UndefinedMetricError, ValidationError
from .metrics import auc
from .nn import Dropout, Embedding, Linear, Module
from .optim import AdamW, CyclicLR
from .tensor import Tensor
from .trainer import DomainRegistry, TrainConfig, TrainReport

FIELDS = ("domain", "user_id", "item_id", "brand")


@dataclass
class BaselineConfig:
    embed_dim: int = 16
    bottom_dims: tuple[int, ...] = (64, 32)
    seed: int = 0


class FeatureIndex:
    """Per-field value -> row maps built from training records; row 0 = unseen."""

    def __init__(self, records):
        self.maps: dict[str, dict[str, int]] = {}
        for f in FIELDS:
            values = sorted({getattr(r, f) for r in records})
            self.maps[f] = {v: i + 1 for i, v in enumerate(values)}

    def size(self, field: str) -> int:
        return len(self.maps[field]) + 1

    def encode(self, records) -> np.ndarray:
        out = np.zeros((len(records), len(FIELDS)), dtype=np.int64)
        for j, f in enumerate(FIELDS):
            m = self.maps[f]
            out[:, j] = [m.get(getattr(r, f), 0) for r in records]
        return out


class SharedBottomBaseline(Module):
    def __init__(self, index: FeatureIndex, domains: list[str], cfg: BaselineConfig, dropout: float = 0.0):
        super().__init__()
        rng = np.random.default_rng(cfg.seed)
        self.index = index
        self.domains = list(domains)
        self.tables = [Embedding(index.size(f), cfg.embed_dim, rng) for f in FIELDS]
        for f, t in zip(FIELDS, self.tables):
            setattr(self, "emb_" + f, t)
        self.bottom = []
        d = cfg.embed_dim * len(FIELDS)
        for i, w in enumerate(cfg.bottom_dims):
            layer = Linear(d, w, rng)
            setattr(self, f"bottom{i}", layer)
            self.bottom.append(layer)
            d = w
        self.drop = Dropout(dropout, np.random.default_rng([cfg.seed, 7]))
        self.heads = Linear(d, len(self.domains), rng)

    def forward(self, feats: np.ndarray) -> Tensor:
        """Per-domain click probabilities, shape (batch, M)."""
        x = T.concat([t(feats[:, j]) for j, t in enumerate(self.tables)], axis=1)
        for layer in self.bottom:
            x = self.drop(T.relu(layer(x)))
        return T.sigmoid(self.heads(x))


def _masks(domains: np.ndarray, reg: DomainRegistry) -> tuple[np.ndarray, np.ndarray]:
    pos = reg.positions(domains)
    if (pos < 0).any():
        raise RegistryError("baseline cannot score domains it was not trained on")
    m = np.zeros((len(pos), len(reg)), dtype=np.float64)
    m[np.arange(len(pos)), pos] = 1.0
    return pos, m


def baseline_predict(model: SharedBottomBaseline, ds: Dataset, batch_size: int = 2048) -> np.ndarray:
    reg = DomainRegistry(tuple(model.domains))
    feats = model.index.encode(ds.records)
    pos, _ = _masks(ds.domain_array(), reg)
    out = np.empty(len(ds), dtype=np.float64)
    with T.no_grad():
        for s in range(0, len(ds), batch_size):
            p = model(feats[s:s + batch_size]).data
            out[s:s + batch_size] = p[np.arange(len(p)), pos[s:s + batch_size]]
    return out


def baseline_evaluate(model: SharedBottomBaseline, ds: Dataset) -> dict[str, float]:
    scores = baseline_predict(model, ds)
    dom = ds.domain_array()
    out = {}
    for d in dict.fromkeys(dom.tolist()):
        sel = dom == d
        try:
            out[d] = auc(scores[sel], ds.labels[sel])
        except UndefinedMetricError:
            continue
    return out


def train_shared_bottom(dataset: Dataset, cfg: TrainConfig,
                        bcfg: BaselineConfig | None = None) -> tuple[SharedBottomBaseline, TrainReport]:
    """Train the baseline on the same splits and shuffle seed as :func:`fit`."""
    cfg.validate()
    bcfg = bcfg or BaselineConfig(seed=cfg.seed)
    train_ds, valid_ds = dataset.subset(TRAIN), dataset.subset(VALID)
    if not len(train_ds) or not len(valid_ds):
        raise ValidationError("training needs non-empty train and valid splits")
    index = FeatureIndex(train_ds.records)
    model = SharedBottomBaseline(index, dataset.domains, bcfg, cfg.dropout)
    reg = DomainRegistry(tuple(model.domains))
    feats = index.encode(train_ds.records)
    labels = train_ds.labels
    _, masks = _masks(train_ds.domain_array(), reg)
    params = dict(model.named_parameters())
    opt = AdamW(params, cfg.lr_high, weight_decay=cfg.weight_decay)
    n = len(train_ds)
    steps = -(-n // cfg.batch_size)
    sched = CyclicLR(cfg.lr_low, cfg.lr_high, max(2, int(round(cfg.cycle_epochs * steps))))
    rng = np.random.default_rng(cfg.seed)
    report = TrainReport()
    best = None
    step = 0
    for epoch in range(cfg.epochs):
        model.train()
        perm = rng.permutation(n)
        for s in range(0, n, cfg.batch_size):
            rows = perm[s:s + cfg.batch_size]
            opt.state.lr = sched(step)
            with T.tape() as tp:
                preds = model(feats[rows])
                y = np.broadcast_to(labels[rows][:, None], preds.shape)
                per = T.bce_loss(preds, y, reduction="none")
                m = masks[rows].astype(per.dtype)
                loss = (per * Tensor._wrap(m, False)).sum() / float(len(rows))
                if not np.isfinite(loss.data):
                    raise T.NumericalError(f"non-finite baseline loss at step {step}")
                grads = tp.backward(loss, params.values())
            opt.step({k: grads[p.node_id] for k, p in params.items()})
            step += 1
        model.eval()
        aucs = baseline_evaluate(model, valid_ds)
        for d, a in aucs.items():
            report.add(epoch, d, "valid", "auc", a)
        score = float(np.mean(list(aucs.values()))) if aucs else float("-inf")
        if score > report.best_score:
            report.best_score, report.best_epoch = score, epoch
            best = {k: p.data.copy() for k, p in params.items()}
    if best is not None:
        for k, arr in best.items():
            params[k].data = arr
    return model, report
