"""``mdctr`` command line.

Exit codes: 0 success, 1 validation or configuration error, 2 numerical
failure (non-finite loss, gradient or activation).  Flags override values
from the ``--config`` file.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt
from . import tensor as T
from .audit import check_decoupling, finite_difference_audit, random_batch, tiny_model
from .baseline import baseline_evaluate, train_shared_bottom
from .config import RunConfig, load_run_config
from .data import TEST, Dataset, generate, ingest_jsonl
from .errors import NumericalError, RegistryError, ValidationError
from .metrics import MetricsReport, per_domain_auc
from .model import ModelConfig, MultiDomainModel
from .prompt import Vocabulary, build_vocab, render_prompt
from .representations import dump_representations
from .trainer import encode_dataset, extend_domain, fit, predict

SPLITS = {"train": 0, "valid": 1, "test": 2}
VOCAB_FILE = "vocab.txt"


# ---------------------------------------------------------------------------
# shared plumbing


def _settings(args) -> RunConfig:
    cfg = load_run_config(getattr(args, "config", None))
    if getattr(args, "seed", None) is not None:
        cfg = cfg.with_seed(args.seed)
    if getattr(args, "strict_mask", False):
        cfg.train = dataclasses.replace(cfg.train, strict_mask=True)
    return cfg


def _dataset(cfg: RunConfig, path: str | None) -> Dataset:
    src = Path(path) if path else cfg.data_path
    if src is None:
        return generate(cfg.synth)
    return ingest_jsonl(src, seed=cfg.seed)


def _save_model(model: MultiDomainModel, vocab: Vocabulary, path: Path, prompt_mode: str, extra=None) -> dict:
    meta = {"model": model.cfg.to_dict(), "domains": model.domains, "prompt_mode": prompt_mode}
    meta.update(extra or {})
    manifest = ckpt.save(path, {k: p.data for k, p in model.named_parameters()}, meta)
    vocab.save(path / VOCAB_FILE)
    return manifest


def _load_model(path: Path) -> tuple[MultiDomainModel, Vocabulary, dict]:
    if not (path / ckpt.MANIFEST).exists():
        raise ValidationError(f"{path} is not a checkpoint directory (no {ckpt.MANIFEST})")
    arrays, manifest = ckpt.load(path)
    meta = manifest["meta"]
    model = MultiDomainModel(ModelConfig.from_dict(meta["model"]), meta["domains"])
    model.load_state_dict(arrays)
    model.eval()
    return model, Vocabulary.load(path / VOCAB_FILE), meta


def _print_counts(ds: Dataset) -> None:
    for d, n in ds.counts().items():
        print(f"{d}\t{n}")


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n", encoding="utf-8")


def _split(ds: Dataset, name: str) -> Dataset:
    return ds if name == "all" else ds.subset(SPLITS[name])


# ---------------------------------------------------------------------------
# commands


def cmd_synth(args) -> int:
    cfg = _settings(args)
    ds = generate(cfg.synth)
    out = Path(args.out)
    try:
        ds.to_jsonl(out)
    except OSError as e:
        raise ValidationError(f"cannot write {out}: {e.strerror}") from None
    _print_counts(ds)
    return 0


def cmd_train(args) -> int:
    cfg = _settings(args)
    ds = _dataset(cfg, args.data)
    if args.domains:
        ds = ds.subset(domains=[d.strip() for d in args.domains.split(",")])
    cfg.check_domains(ds.domains)
    out = Path(args.out) if args.out else cfg.out_dir
    out.mkdir(parents=True, exist_ok=True)
    if args.baseline == "shared-bottom":
        base, report = train_shared_bottom(ds, cfg.train)
        test = baseline_evaluate(base, ds.subset(TEST))
        report.write_jsonl(out / "report.jsonl")
        _write_json(out / "metrics.json", {"model": "shared-bottom", "test_auc": test})
        for d, a in test.items():
            print(f"{d}\ttest_auc={a:.4f}")
        return 0
    mode = cfg.train.prompt_mode
    vocab = build_vocab((render_prompt(r, mode) for r in ds.subset(SPLITS["train"]).records), cfg.vocab_max)
    model = MultiDomainModel(cfg.model_config(len(vocab)), ds.domains)
    report = fit(model, ds, cfg.train, vocab)
    test = _metrics(model, vocab, ds.subset(TEST), mode)
    _save_model(model, vocab, out / "checkpoint", mode, {"seed": cfg.seed})
    report.write_jsonl(out / "report.jsonl")
    report.write_audit(out / "audit.jsonl")
    _write_json(out / "metrics.json", {"model": "multi-domain", "best_epoch": report.best_epoch,
                                       "test": test.to_json()})
    print(f"best epoch {report.best_epoch}; checkpoint {out / 'checkpoint'}")
    for d, a in test.auc.items():
        print(f"{d}\ttest_auc={a:.4f}")
    return 0


def _metrics(model, vocab, ds: Dataset, mode: str, force_general: bool = False) -> MetricsReport:
    batch = encode_dataset(ds, vocab, model.cfg.backbone.max_seq_len, mode)
    scores = predict(model, batch, force_general=force_general)
    return per_domain_auc(scores, batch.labels, batch.domains)


def cmd_eval(args) -> int:
    cfg = _settings(args)
    model, vocab, meta = _load_model(Path(args.checkpoint))
    ds = _split(_dataset(cfg, args.data), args.split)
    if args.zero_shot:
        ds = ds.subset(domains=[args.zero_shot])
        force = True
    else:
        if args.domain:
            if args.domain not in model.domains:
                raise RegistryError(f"checkpoint has no group 'dsn.{args.domain}'; "
                                    f"available: {model.domains} (use --zero-shot for unseen domains)")
            ds = ds.subset(domains=[args.domain])
        force = False
    if not len(ds):
        raise ValidationError("no samples selected for evaluation")
    rep = _metrics(model, vocab, ds, meta.get("prompt_mode", "full"), force_general=force)
    result = rep.to_json()
    result["zero_shot"] = bool(args.zero_shot)
    print(json.dumps(result, sort_keys=True))
    if args.out:
        _write_json(Path(args.out), result)
    return 0


def cmd_zero_shot(args) -> int:
    args.zero_shot = args.domain
    args.domain = None
    return cmd_eval(args)


def cmd_add_domain(args) -> int:
    cfg = _settings(args)
    src = Path(args.checkpoint)
    model, vocab, meta = _load_model(src)
    ds = _dataset(cfg, args.data)
    if args.domain:
        ds = ds.subset(domains=[args.domain])
    if len(ds.domains) != 1:
        raise ValidationError(f"new-domain data must hold exactly one domain, got {ds.domains} (use --domain)")
    name = ds.domains[0]
    if name in model.domains:
        raise RegistryError(f"domain {name!r} already has a DSN in {src}")
    old_arrays, _ = ckpt.load(src)
    report = extend_domain(model, ds, cfg.train, vocab)
    out = Path(args.out)
    manifest = _save_model(model, vocab, out, meta.get("prompt_mode", "full"), {"seed": meta.get("seed")})
    new_arrays, _ = ckpt.load(out)
    changed = {k: int(np.count_nonzero(old_arrays[k].view(np.uint8) != new_arrays[k].view(np.uint8)))
               for k in old_arrays}
    audit = {
        "new_domain": name,
        "new_section": model.group_of(name),
        "changed_bytes_outside_new_section": sum(changed.values()),
        "changed_tensors": sorted(k for k, n in changed.items() if n),
        "section_checksums": manifest["checksums"],
        "frozen_checksums_before": report.extra["frozen_checksums"],
    }
    _write_json(out / "extension_audit.json", audit)
    report.write_jsonl(out / "report.jsonl")
    print(f"added {name!r}; changed bytes outside {audit['new_section']}: "
          f"{audit['changed_bytes_outside_new_section']}")
    return 0 if audit["changed_bytes_outside_new_section"] == 0 else 2


def cmd_grad_check(args) -> int:
    if args.scale != "tiny":
        raise ValidationError("only --scale tiny is supported")
    seed = 0 if args.seed is None else args.seed
    rng = np.random.default_rng(seed)
    with T.precision(64):
        model = tiny_model(seed)
        model.train(False)
        violations = []
        for i in range(args.batches):
            present = [model.domains[i % len(model.domains)]]
            batch = random_batch(rng, 6, model.domains, domain_pool=present)
            rep = check_decoupling(model, batch, strict=bool(args.strict_mask), corrupt_mask=args.corrupt_mask)
            violations += [f"batch {i}: {v}" for v in rep.violations]
        batch = random_batch(rng, 2, model.domains, domain_pool=model.domains[:1])
        _, per_group = finite_difference_audit(model, batch, groups=("backbone", "general", model.group_of(model.domains[0])))
    failed = {g: e for g, e in per_group.items() if not e < args.tol}
    report = {"max_rel_error": per_group, "tolerance": args.tol,
              "decoupling_violations": violations, "failed_groups": sorted(failed)}
    print(json.dumps(report, indent=1, sort_keys=True))
    if args.out:
        _write_json(Path(args.out), report)
    if violations:
        print("decoupling assertion failed: " + "; ".join(violations[:3]), file=sys.stderr)
        return 1
    if failed:
        print(f"finite-difference mismatch in groups {sorted(failed)}", file=sys.stderr)
        return 2
    return 0


def cmd_dump_reps(args) -> int:
    cfg = _settings(args)
    model, vocab, meta = _load_model(Path(args.checkpoint))
    ds = _split(_dataset(cfg, args.data), args.split)
    if args.limit is not None:
        ds = Dataset(ds.records[: args.limit], ds.split[: args.limit])
    batch = encode_dataset(ds, vocab, model.cfg.backbone.max_seq_len, meta.get("prompt_mode", "full"))
    n = dump_representations(model, batch, args.selector, args.out)
    print(f"wrote {n} rows to {args.out}")
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=argparse.SUPPRESS, help="run configuration file (INI)")
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="overrides every seed in the config")
    common.add_argument("--precision", type=int, choices=(32, 64), default=argparse.SUPPRESS)
    common.add_argument("--strict-mask", action="store_true", default=argparse.SUPPRESS,
                        help="run every DSN on every sample and mask the loss")

    p = argparse.ArgumentParser(prog="mdctr", parents=[common],
                                description="Multi-domain CTR prediction with pluggable domain networks.")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", parents=[common], help="write a seeded synthetic JSONL dataset")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("train", parents=[common], help="train a model and write checkpoint + report")
    s.add_argument("--data", help="JSONL dataset (default: [data] path, else synthesise)")
    s.add_argument("--domains", help="comma-separated subset of domains to train on")
    s.add_argument("--out", help="output directory (default: [output] dir)")
    s.add_argument("--baseline", choices=("shared-bottom",), help="train the ID-only baseline instead")
    s.set_defaults(func=cmd_train)

    for name, fn in (("eval", cmd_eval), ("zero-shot", cmd_zero_shot)):
        s = sub.add_parser(name, parents=[common], help="evaluate a checkpoint")
        s.add_argument("--checkpoint", required=True)
        s.add_argument("--data")
        s.add_argument("--split", choices=(*SPLITS, "all"), default="test")
        s.add_argument("--out", help="also write the metrics report here")
        if name == "eval":
            g = s.add_mutually_exclusive_group()
            g.add_argument("--domain", help="restrict to one known domain")
            g.add_argument("--zero-shot", metavar="DOMAIN", help="score DOMAIN with the general head only")
        else:
            s.add_argument("--domain", required=True, help="domain to score with the general head")
        s.set_defaults(func=fn)

    s = sub.add_parser("add-domain", parents=[common], help="freeze a checkpoint and train one new DSN")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data")
    s.add_argument("--domain", help="pick this domain's records from the data")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_add_domain)

    s = sub.add_parser("grad-check", parents=[common], help="finite-difference and decoupling audit")
    s.add_argument("--scale", default="tiny", choices=("tiny",))
    s.add_argument("--batches", type=int, default=10)
    s.add_argument("--tol", type=float, default=1e-3)
    s.add_argument("--out")
    s.add_argument("--corrupt-mask", action="store_true", help=argparse.SUPPRESS)
    s.set_defaults(func=cmd_grad_check)

    s = sub.add_parser("dump-reps", parents=[common], help="write representations as TSV")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data")
    s.add_argument("--selector", required=True, help="h_<layer>, dsn:<domain> or general")
    s.add_argument("--split", choices=(*SPLITS, "all"), default="test")
    s.add_argument("--limit", type=int)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_dump_reps)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    for key, default in (("config", None), ("seed", None), ("precision", 32), ("strict_mask", False)):
        if not hasattr(args, key):
            setattr(args, key, default)
    try:
        with T.precision(args.precision):
            return args.func(args)
    except NumericalError as e:
        print(f"numerical error: {e}", file=sys.stderr)
        return 2
    except (ValidationError, KeyError, IndexError, T.DimensionError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except OSError as e:
        print(f"error: {e.filename or ''}: {e.strerror}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
