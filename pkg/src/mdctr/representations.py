"""Representation dumps for external t-SNE tooling."""
from __future__ import annotations

import csv
import re
from pathlib import Path

import numpy as np

from . import tensor as T
from .errors import ValidationError
from .model import MultiDomainModel
from .trainer import Batch

_LAYER = re.compile(r"h_(\d+)$")


def parse_selector(selector: str, model: MultiDomainModel) -> tuple[str, int | str]:
    """``h_<l>`` -> ("layer", l); ``dsn:<name>`` -> ("dsn", name); ``general``."""
    m = _LAYER.match(selector)
    if m:
        layer = int(m.group(1))
        if layer > model.cfg.backbone.num_layers:
            raise ValidationError(f"selector {selector!r}: backbone has layers 0..{model.cfg.backbone.num_layers}")
        return "layer", layer
    if selector.startswith("dsn:"):
        name = selector[4:]
        if name not in model.dsns:
            raise ValidationError(f"selector {selector!r}: no DSN for domain {name!r}; have {model.domains}")
        return "dsn", name
    if selector == "general":
        return "general", ""
    raise ValidationError(f"unknown selector {selector!r}; expected h_<layer>, dsn:<domain> or general")


def representations(model: MultiDomainModel, batch: Batch, selector: str, batch_size: int = 512) -> np.ndarray:
    """One vector per sample: a pooled backbone layer or a penultimate tower layer."""
    kind, key = parse_selector(selector, model)
    chunks = []
    with T.no_grad():
        for s in range(0, len(batch), batch_size):
            sub = batch.rows(slice(s, s + batch_size))
            taps = model.taps(sub.ids, sub.mask)
            if kind == "layer":
                v = model.backbone.pool(taps.h[key], sub.mask)
            elif kind == "dsn":
                v = model.dsns[key].penultimate(taps)
            else:
                v = model.general.penultimate(taps.last, sub.mask)
            chunks.append(v.data)
    return np.concatenate(chunks, axis=0)


def dump_representations(model: MultiDomainModel, batch: Batch, selector: str, path: str | Path,
                         sample_ids=None) -> int:
    """Write a TSV with a header row: domain, sample_id, v0..v{d-1}.  Returns the row count."""
    vecs = representations(model, batch, selector)
    ids = list(range(len(batch))) if sample_ids is None else list(sample_ids)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(["domain", "sample_id", *(f"v{j}" for j in range(vecs.shape[1]))])
        for dom, sid, v in zip(batch.domains, ids, vecs):
            w.writerow([dom, sid, *(repr(float(x)) for x in v)])
    return len(vecs)
