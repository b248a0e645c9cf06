"""Synthetic multi-domain click logs, JSONL ingestion, train/valid/test splits.

Generative story for the synthetic set.  Each item has a discrete attribute
vector ``a`` in {-1, 0, 1}^k.  The first k-1 attributes are spelled out as
title words drawn from a lexicon shared by all domains; the last one only
shows through the price band.  Nouns and brands come from per-domain pools,
so the text also identifies the domain.

    item latent   v = alpha * a + (1 - alpha) * G_d a
    user latent   u = alpha * (mu + p_user) + (1 - alpha) * (mu_d + r_user,d)
    P(click)      = sigmoid(signal * <u, v> / sqrt(k) + b_d)

``alpha`` sets how much of the click function is shared across domains.
Labels are drawn from P(click) and then flipped with probability ``noise``.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigError, ValidationError
from .prompt import InteractionRecord

TRAIN, VALID, TEST = 0, 1, 2
SPLIT_NAMES = ("train", "valid", "test")
SPLIT_FRACTIONS = (0.8, 0.1, 0.1)

ATTRIBUTE_WORDS = (
    ("budget", "classic", "deluxe"),
    ("compact", "standard", "oversized"),
    ("matte", "glossy", "sparkling"),
    ("vintage", "modern", "futuristic"),
    ("plain", "patterned", "embroidered"),
    ("light", "sturdy", "heavy"),
    ("basic", "refined", "luxurious"),
)
PRICE_BANDS = (
    ("4.99", "7.99", "9.99"),
    ("19.99", "24.99", "29.99"),
    ("49.99", "59.99", "79.99"),
)
DOMAIN_TERMS = {
    "Fashion": (
        ("jacket", "scarf", "sneakers", "dress", "belt", "hoodie", "sandals", "blouse"),
        ("Urbanix", "Loomcraft", "Velvetta", "Stridewell", "Modaro", "Kestrel"),
    ),
    "Musical Instruments": (
        ("guitar", "harmonica", "ukulele", "drumsticks", "keyboard", "violin", "capo", "tuner"),
        ("Fender", "Harmonix", "Tonewood", "Beatcraft", "Melodia", "Stringwise"),
    ),
    "Gift Cards": (
        ("giftcard", "voucher", "egift", "certificate", "giftbox", "coupon"),
        ("Fun Express", "Cardly", "Giftora", "Presento"),
    ),
    "All Beauty": (
        ("lipstick", "serum", "shampoo", "mascara", "lotion", "perfume", "cleanser", "palette"),
        ("Glowra", "Lumiere", "Silkara", "Bellamie", "Purelle", "Roseate"),
    ),
    "Digital Music": (
        ("album", "single", "soundtrack", "remix", "playlist", "ep", "anthology", "concert"),
        ("Vinylo", "Echowave", "Beatline", "Sonora", "Audiant", "Rhythmix"),
    ),
}
DEFAULT_DOMAINS = ("Fashion", "Musical Instruments", "Gift Cards")


def domain_terms(name: str) -> tuple[tuple[str, ...], tuple[str, ...]]:
    if name in DOMAIN_TERMS:
        return DOMAIN_TERMS[name]
    stem = "".join(ch for ch in name.lower() if ch.isalnum()) or "domain"
    nouns = tuple(f"{stem}{w}" for w in ("kit", "set", "pack", "piece", "unit", "bundle"))
    brands = tuple(f"{stem.capitalize()}{w}" for w in ("co", "works", "lab", "house"))
    return nouns, brands


@dataclass
class SynthConfig:
    domains: tuple[str, ...] = DEFAULT_DOMAINS
    samples: tuple[int, ...] = (4000, 4000, 1000)
    items: tuple[int, ...] | None = None
    num_users: int = 1000
    latent_dim: int = 4
    alpha: float = 0.6
    noise: float = 0.0
    signal: float = 6.0
    user_spread: float = 0.4
    domain_bias: float = 0.3
    seed: int = 0
    min_samples: int = 10

    def item_counts(self) -> tuple[int, ...]:
        if self.items is not None:
            return tuple(self.items)
        return tuple(max(20, n // 10) for n in self.samples)

    def validate(self) -> None:
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError(f"alpha must lie in [0, 1], got {self.alpha}")
        if not 0.0 <= self.noise <= 1.0:
            raise ConfigError(f"noise rate must lie in [0, 1], got {self.noise}")
        if len(self.samples) != len(self.domains):
            raise ConfigError(f"{len(self.domains)} domains but {len(self.samples)} sample counts")
        if len(set(self.domains)) != len(self.domains):
            raise ConfigError("domain names must be unique")
        if len(self.item_counts()) != len(self.domains):
            raise ConfigError("one item count per domain required")
        for d, n in zip(self.domains, self.samples):
            if n < self.min_samples:
                raise ConfigError(f"domain {d!r} has {n} samples; at least {self.min_samples} needed for splits")
        if any(m < 1 for m in self.item_counts()):
            raise ConfigError("every domain needs at least one item")
        if self.num_users < 1:
            raise ConfigError("num_users must be positive")
        if not 2 <= self.latent_dim <= len(ATTRIBUTE_WORDS) + 1:
            raise ConfigError(f"latent_dim must be in [2, {len(ATTRIBUTE_WORDS) + 1}]")


@dataclass
class Dataset:
    records: list[InteractionRecord]
    split: np.ndarray
    true_prob: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.records)

    @property
    def domains(self) -> list[str]:
        return list(dict.fromkeys(r.domain for r in self.records))

    @property
    def labels(self) -> np.ndarray:
        return np.array([r.label for r in self.records], dtype=np.int64)

    def domain_array(self) -> np.ndarray:
        return np.array([r.domain for r in self.records], dtype=object)

    def subset(self, split: int | None = None, domains: Iterable[str] | None = None) -> "Dataset":
        keep = np.ones(len(self.records), dtype=bool)
        if split is not None:
            keep &= self.split == split
        if domains is not None:
            wanted = set(domains)
            keep &= np.array([r.domain in wanted for r in self.records], dtype=bool)
        idx = np.flatnonzero(keep)
        return Dataset(
            [self.records[i] for i in idx],
            self.split[idx],
            None if self.true_prob is None else self.true_prob[idx],
            dict(self.meta),
        )

    def counts(self) -> dict[str, int]:
        out: dict[str, int] = {}
        for r in self.records:
            out[r.domain] = out.get(r.domain, 0) + 1
        return out

    def to_jsonl(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            for r in self.records:
                fh.write(json.dumps(r.to_json(), ensure_ascii=False) + "\n")


def assign_splits(domains: Sequence[str], seed: int = 0) -> np.ndarray:
    """80/10/10 per domain, seeded permutation within each domain."""
    domains = np.asarray(domains, dtype=object)
    split = np.full(len(domains), TRAIN, dtype=np.int64)
    for name in dict.fromkeys(domains.tolist()):
        idx = np.flatnonzero(domains == name)
        rng = np.random.default_rng([seed, len(idx), *str(name).encode()])
        perm = idx[rng.permutation(len(idx))]
        n_train = int(round(SPLIT_FRACTIONS[0] * len(idx)))
        n_valid = int(round(SPLIT_FRACTIONS[1] * len(idx)))
        split[perm[n_train:n_train + n_valid]] = VALID
        split[perm[n_train + n_valid:]] = TEST
    return split


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def generate(cfg: SynthConfig) -> Dataset:
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    k = cfg.latent_dim
    m = len(cfg.domains)
    mu = rng.normal(size=k)
    mu /= np.linalg.norm(mu)
    mu_d = rng.normal(size=(m, k))
    mu_d /= np.linalg.norm(mu_d, axis=1, keepdims=True)
    g_d = rng.normal(size=(m, k, k)) / np.sqrt(k)
    bias_d = rng.normal(scale=cfg.domain_bias, size=m)
    p_user = rng.normal(scale=cfg.user_spread, size=(cfg.num_users, k))
    r_user = rng.normal(scale=cfg.user_spread, size=(m, cfg.num_users, k))

    records: list[InteractionRecord] = []
    probs: list[np.ndarray] = []
    a = cfg.alpha
    for d, (name, n, n_items) in enumerate(zip(cfg.domains, cfg.samples, cfg.item_counts())):
        nouns, brands = domain_terms(name)
        attrs = rng.integers(-1, 2, size=(n_items, k))
        v = a * attrs + (1 - a) * attrs @ g_d[d].T
        noun = rng.integers(len(nouns), size=n_items)
        brand = rng.integers(len(brands), size=n_items)
        band = rng.integers(3, size=n_items)
        titles = [
            " ".join([*(ATTRIBUTE_WORDS[j][attrs[i, j] + 1] for j in range(k - 1)), nouns[noun[i]]])
            for i in range(n_items)
        ]
        prices = [PRICE_BANDS[attrs[i, k - 1] + 1][band[i]] for i in range(n_items)]
        prefix = "".join(w[0] for w in name.lower().split()) or "x"
        item_ids = [f"{prefix}{i}" for i in range(n_items)]

        users = rng.integers(cfg.num_users, size=n)
        items = rng.integers(n_items, size=n)
        u = a * (mu + p_user[users]) + (1 - a) * (mu_d[d] + r_user[d, users])
        logit = cfg.signal * np.einsum("nk,nk->n", u, v[items]) / np.sqrt(k) + bias_d[d]
        prob = _sigmoid(logit)
        y = (rng.random(n) < prob).astype(np.int64)
        flip = rng.random(n) < cfg.noise
        y = np.where(flip, 1 - y, y)

        # history: two draws without replacement from 8 candidates, weighted by
        # the user's click propensity (Gumbel top-k), oldest first
        cand = rng.integers(n_items, size=(n, 8))
        cand_logit = cfg.signal * np.einsum("nk,nck->nc", u, v[cand]) / np.sqrt(k)
        gumbel = -np.log(-np.log(rng.random((n, 8))))
        top = np.argsort(-(cand_logit + gumbel), axis=1)[:, :2]
        hist_len = rng.choice(3, size=n, p=(0.1, 0.2, 0.7))
        for s in range(n):
            hist = [titles[cand[s, top[s, j]]] for j in range(hist_len[s])]
            it = items[s]
            records.append(
                InteractionRecord(
                    domain=name,
                    user_id=f"u{users[s]}",
                    history=hist,
                    item_id=item_ids[it],
                    title=titles[it],
                    brand=brands[brand[it]],
                    price=prices[it],
                    label=int(y[s]),
                )
            )
        # P(observed label = 1), i.e. the Bayes-optimal score
        probs.append(prob * (1 - cfg.noise) + (1 - prob) * cfg.noise)
    split = assign_splits([r.domain for r in records], cfg.seed)
    return Dataset(records, split, np.concatenate(probs), {"synth": cfg})


_REQUIRED = ("domain", "user_id", "item_id", "title", "brand", "price")


def _parse_line(obj) -> InteractionRecord:
    if not isinstance(obj, dict):
        raise ValidationError("line is not a JSON object")
    for key in _REQUIRED:
        if key not in obj or obj[key] is None or (isinstance(obj[key], str) and not obj[key].strip()):
            raise ValidationError(f"missing field {key!r}")
    history = obj.get("history", [])
    if not isinstance(history, list) or not all(isinstance(h, str) for h in history):
        raise ValidationError("field 'history' must be a list of strings")
    if "rating" in obj and obj["rating"] is not None:
        try:
            label = 1 if float(obj["rating"]) > 3 else 0
        except (TypeError, ValueError):
            raise ValidationError("field 'rating' is not a number") from None
    elif "label" in obj:
        label = obj["label"]
        if label not in (0, 1) or isinstance(label, bool):
            raise ValidationError(f"field 'label' must be 0 or 1, got {label!r}")
    else:
        raise ValidationError("missing field 'label' (and no 'rating')")
    return InteractionRecord(
        domain=str(obj["domain"]),
        user_id=str(obj["user_id"]),
        history=list(history),
        item_id=str(obj["item_id"]),
        title=str(obj["title"]),
        brand=str(obj["brand"]),
        price=str(obj["price"]),
        label=int(label),
    )


def ingest_jsonl(path: str | Path, seed: int = 0, max_bad_fraction: float = 0.01) -> Dataset:
    """Parse a JSONL click log.  A ``rating`` field overrides ``label`` (> 3 is a click).

    Malformed lines are skipped and reported in ``meta["malformed"]``; if more
    than ``max_bad_fraction`` of lines are malformed the whole file is rejected.
    """
    path = Path(path)
    if not path.exists():
        raise ValidationError(f"{path}: no such file")
    records: list[InteractionRecord] = []
    bad: list[tuple[int, str]] = []
    total = 0
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            total += 1
            try:
                records.append(_parse_line(json.loads(line)))
            except json.JSONDecodeError as exc:
                bad.append((lineno, f"invalid JSON ({exc.msg})"))
            except ValidationError as exc:
                bad.append((lineno, str(exc)))
    if total == 0:
        raise ValidationError(f"{path}: file contains no records")
    if len(bad) > max_bad_fraction * total:
        detail = "; ".join(f"line {n}: {msg}" for n, msg in bad[:20])
        raise ValidationError(f"{path}: {len(bad)}/{total} malformed lines: {detail}")
    split = assign_splits([r.domain for r in records], seed)
    return Dataset(records, split, None, {"source": str(path), "malformed": bad})
