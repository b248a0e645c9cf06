"""AUC and RelaImpr."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.stats import rankdata

from .errors import UndefinedMetricError


def auc(scores, labels) -> float:
    """Area under the ROC curve via the Mann-Whitney rank statistic.

    Tied scores use average ranks, so each positive/negative tie counts 1/2.
    """
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    y = np.asarray(labels).reshape(-1)
    if s.shape != y.shape:
        raise ValueError(f"{s.size} scores vs {y.size} labels")
    pos = y == 1
    n_pos = int(pos.sum())
    n_neg = int((y == 0).sum())
    if n_pos + n_neg != y.size:
        raise ValueError("labels must be 0 or 1")
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUC is undefined when only one class is present")
    ranks = rankdata(s)  # average ranks, multiples of 1/2
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def rela_impr(auc_measure: float, auc_base: float) -> float:
    """Relative AUC improvement over a base model, in percent."""
    if auc_base == 0.5:
        raise UndefinedMetricError("RelaImpr is undefined for a base AUC of exactly 0.5")
    return ((auc_measure - 0.5) / (auc_base - 0.5) - 1.0) * 100.0


@dataclass
class MetricsReport:
    auc: dict[str, float] = field(default_factory=dict)
    counts: dict[str, int] = field(default_factory=dict)
    rela_impr: dict[str, float] = field(default_factory=dict)
    base: str | None = None

    def compare_to(self, base: "MetricsReport", name: str = "base") -> None:
        self.base = name
        self.rela_impr = {d: rela_impr(a, base.auc[d]) for d, a in self.auc.items() if d in base.auc}

    def to_json(self) -> dict:
        return {"auc": self.auc, "counts": self.counts, "rela_impr": self.rela_impr, "base": self.base}


def per_domain_auc(scores: np.ndarray, labels: np.ndarray, domains: np.ndarray) -> MetricsReport:
    rep = MetricsReport()
    for d in dict.fromkeys(domains.tolist()):
        sel = domains == d
        rep.auc[d] = auc(scores[sel], labels[sel])
        rep.counts[d] = int(sel.sum())
    return rep
