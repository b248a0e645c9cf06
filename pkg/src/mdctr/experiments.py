"""Paired-run harness for the scaled-down experiments.

Each experiment trains models on seeded synthetic data and returns plain
dicts of test AUCs, so the acceptance suite and the CLI can both consume
them.  Model sizes here are desk defaults, small enough that five seeds of
each experiment finish in minutes on one CPU core.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, replace

import numpy as np

from .backbone import BackboneConfig
from .baseline import baseline_evaluate, train_shared_bottom
from .data import TEST, TRAIN, Dataset, SynthConfig, generate
from .dsn import DsnConfig
from .errors import UndefinedMetricError
from .metrics import auc
from .model import ModelConfig, MultiDomainModel
from .prompt import Vocabulary, build_vocab, render_prompt, words
from .trainer import TrainConfig, encode_dataset, evaluate, extend_domain, fit, predict

SEESAW_COUNTS = (20000, 20000, 1000)
SEESAW_ITEMS = (1000, 1000, 500)
HELD_OUT = "All Beauty"
ABLATION_DOMAINS = ("Fashion", "Musical Instruments", "Gift Cards")
# Transfer corpus: a larger shared component and a smaller, richer user base,
# so that cross-domain user knowledge is learnable at desk scale.
TRANSFER_ALPHA = 0.8
TRANSFER_USERS = 200
TRANSFER_LATENT = 8


@dataclass
class DeskScale:
    """Backbone and DSN sizes used by every experiment."""

    num_layers: int = 2
    hidden_dim: int = 32
    num_heads: int = 2
    ffn_dim: int = 64
    tap_frequency: int = 1
    ladder_dim: int = 16
    gate_dim: int = 16
    tower_dims: tuple[int, ...] = (32, 16)
    vocab_max: int = 10000
    epochs: int = 3
    batch_size: int = 128


def padded_length(ds: Dataset, mode: str) -> int:
    """Sequence length that fits the longest prompt plus BOS/EOS."""
    return max(len(words(render_prompt(r, mode))) for r in ds.records) + 2


def desk_model(vocab: Vocabulary, seq_len: int, domains, scale: DeskScale, seed: int) -> MultiDomainModel:
    cfg = ModelConfig(
        backbone=BackboneConfig(
            vocab_size=len(vocab), num_layers=scale.num_layers, hidden_dim=scale.hidden_dim,
            num_heads=scale.num_heads, ffn_dim=scale.ffn_dim, max_seq_len=seq_len,
        ),
        dsn=DsnConfig(
            "template", tap_frequency=scale.tap_frequency, ladder_dim=scale.ladder_dim,
            ladder_heads=2, ladder_ffn_dim=2 * scale.ladder_dim, gate_dim=scale.gate_dim,
            tower_dims=scale.tower_dims,
        ),
        general_tower_dims=scale.tower_dims,
        seed=seed,
    )
    return MultiDomainModel(cfg, list(domains))


def train_config(scale: DeskScale, seed: int, **kw) -> TrainConfig:
    return TrainConfig(epochs=scale.epochs, batch_size=scale.batch_size, seed=seed,
                       cycle_epochs=float(scale.epochs), **kw)


@dataclass
class Run:
    model: MultiDomainModel
    vocab: Vocabulary
    seq_len: int
    mode: str
    test_auc: dict[str, float]
    seconds: float


def train_model(ds: Dataset, scale: DeskScale, seed: int, mode: str = "full",
                domains=None) -> Run:
    """Fit on ``domains`` (default: all) and report their test AUCs.

    The padded length covers every prompt in ``ds`` so that domains held out
    of training can still be scored without truncation.
    """
    t0 = time.perf_counter()
    sub = ds if domains is None else ds.subset(domains=domains)
    seq = padded_length(ds, mode)
    vocab = build_vocab((render_prompt(r, mode) for r in sub.subset(TRAIN).records), scale.vocab_max)
    model = desk_model(vocab, seq, sub.domains, scale, seed)
    fit(model, sub, train_config(scale, seed, prompt_mode=mode), vocab)
    test = encode_dataset(sub.subset(TEST), vocab, seq, mode)
    return Run(model, vocab, seq, mode, evaluate(model, test), time.perf_counter() - t0)


# ---------------------------------------------------------------------------
# seesaw


def seesaw_data(seed: int, alpha: float = 0.6) -> Dataset:
    return generate(SynthConfig(samples=SEESAW_COUNTS, items=SEESAW_ITEMS, alpha=alpha, seed=seed))


def seesaw_run(seed: int, scale: DeskScale | None = None, alpha: float = 0.6) -> dict:
    """Multi-domain model vs the shared-bottom baseline on imbalanced data."""
    scale = scale or DeskScale()
    ds = seesaw_data(seed, alpha)
    run = train_model(ds, scale, seed)
    t0 = time.perf_counter()
    base, _ = train_shared_bottom(ds, train_config(scale, seed, lr_low=1e-4, lr_high=1e-3, dropout=0.0))
    base_auc = baseline_evaluate(base, ds.subset(TEST))
    sparse = ds.domains[int(np.argmin(SEESAW_COUNTS))]
    return {
        "seed": seed,
        "sparse_domain": sparse,
        "model": run.test_auc,
        "baseline": base_auc,
        "margin": run.test_auc[sparse] - base_auc[sparse],
        "seconds": run.seconds + time.perf_counter() - t0,
    }


# ---------------------------------------------------------------------------
# zero-shot and extension share one 4-domain corpus; the ablation has its own


def transfer_data(seed: int, alpha: float = TRANSFER_ALPHA, per_domain: int = 4000) -> Dataset:
    domains = ("Fashion", "Musical Instruments", "Gift Cards", HELD_OUT)
    return generate(SynthConfig(domains=domains, samples=(per_domain,) * 4, alpha=alpha, seed=seed,
                                num_users=TRANSFER_USERS, latent_dim=TRANSFER_LATENT))


def _auc_or_nan(scores, labels) -> float:
    try:
        return auc(scores, labels)
    except UndefinedMetricError:
        return float("nan")


def transfer_auc(run: Run, target: Dataset, force_general: bool) -> float:
    """AUC of a trained model on another domain's samples.

    With ``force_general`` the general head scores them; otherwise they are
    routed to the DSN of the model's first trained domain.  Prompts keep the
    target's own text either way.
    """
    batch = encode_dataset(target, run.vocab, run.seq_len, run.mode)
    if not force_general:
        batch.domains = np.full(len(batch), run.model.domains[0], dtype=object)
    return _auc_or_nan(predict(run.model, batch, force_general=force_general), target.labels)


def zero_shot_run(seed: int, scale: DeskScale | None = None, alpha: float = TRANSFER_ALPHA) -> dict:
    """General head of a 3-domain model vs single-domain models on an unseen domain."""
    scale = scale or DeskScale()
    ds = transfer_data(seed, alpha)
    known = [d for d in ds.domains if d != HELD_OUT]
    target = ds.subset(domains=[HELD_OUT])  # never trained on, so every split is unseen
    multi = train_model(ds, scale, seed, domains=known)
    single = {d: transfer_auc(train_model(ds, scale, seed, domains=[d]), target, False) for d in known}
    return {
        "seed": seed,
        "general": transfer_auc(multi, target, True),
        "single": single,
        "best_single": max(single.values()),
        "multi_test": multi.test_auc,
        "run": multi,
    }


def ablation_data(seed: int) -> Dataset:
    """Sparse-ID corpus for the prompt ablation.

    Many users with few clicks each, and a low latent dimension so the price
    band carries a third of the item signal.  This is the regime where the
    history and price fields hold information the ID tokens cannot.
    """
    return generate(SynthConfig(domains=ABLATION_DOMAINS, samples=(4000,) * 3, latent_dim=3, seed=seed))


def ablation_run(seed: int, scale: DeskScale | None = None) -> dict[str, float]:
    """Mean test AUC over the domains for each prompt mode."""
    scale = scale or DeskScale()
    ds = ablation_data(seed)
    out = {}
    for mode in ("full", "id_name", "id_only"):
        run = train_model(ds, scale, seed, mode)
        out[mode] = float(np.mean([run.test_auc[d] for d in ds.domains]))
    return out


def extension_run(seed: int, base: Run, scale: DeskScale | None = None, alpha: float = TRANSFER_ALPHA) -> dict:
    """Freeze a trained 3-domain model, attach and train a DSN for the held-out domain."""
    scale = scale or DeskScale()
    ds = transfer_data(seed, alpha)
    known = list(base.model.domains)
    old_test = encode_dataset(ds.subset(TEST, known), base.vocab, base.seq_len, base.mode)
    before = evaluate(base.model, old_test)
    report = extend_domain(base.model, ds.subset(domains=[HELD_OUT]), train_config(scale, seed), base.vocab)
    after = evaluate(base.model, old_test)
    new_test = encode_dataset(ds.subset(TEST, [HELD_OUT]), base.vocab, base.seq_len, base.mode)
    return {
        "seed": seed,
        "new_domain_auc": evaluate(base.model, new_test)[HELD_OUT],
        "old_before": before,
        "old_after": after,
        "changed_groups": report.extra["changed_groups"],
        "frozen_checksums": report.extra["frozen_checksums"],
        "checksums_after": base.model.checksums(),
    }
