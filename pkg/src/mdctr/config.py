"""Run configuration files.

A run file is INI-style with sections ``[data]``, ``[backbone]``, ``[dsn]``,
``[dsn.<domain>]``, ``[general]``, ``[train]`` and ``[output]``.  Keys map
onto the dataclass fields of the matching config objects; values are coerced
from the type of each field's default.  Command-line flags override file
values.
"""
from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

from .backbone import BackboneConfig
from .data import SynthConfig
from .dsn import DsnConfig
from .errors import ConfigError
from .model import ModelConfig
from .trainer import TrainConfig

DSN_SECTION = "dsn."
KNOWN_SECTIONS = ("data", "backbone", "dsn", "general", "train", "output")


def _coerce(value: str, default, key: str):
    try:
        if isinstance(default, bool):
            lowered = value.strip().lower()
            if lowered not in configparser.ConfigParser.BOOLEAN_STATES:
                raise ValueError(value)
            return configparser.ConfigParser.BOOLEAN_STATES[lowered]
        if isinstance(default, int):
            return int(value)
        if isinstance(default, float):
            return float(value)
        if isinstance(default, tuple):
            parts = [p.strip() for p in value.split(",") if p.strip()]
            if not default or isinstance(default[0], str):
                return tuple(parts)
            if isinstance(default[0], float):
                return tuple(float(p) for p in parts)
            return tuple(int(p) for p in parts)
        if default is None:  # optional per-domain count vector
            return tuple(int(p) for p in value.split(","))
        return value.strip()
    except ValueError:
        raise ConfigError(f"key {key!r}: cannot parse {value!r} like {default!r}") from None


def _fill(obj, section: configparser.SectionProxy, skip: tuple[str, ...] = ()):
    names = {f.name for f in dataclasses.fields(obj)}
    updates = {}
    for key, raw in section.items():
        if key in skip:
            continue
        if key not in names:
            raise ConfigError(f"[{section.name}] unknown key {key!r}; valid keys are {sorted(names)}")
        updates[key] = _coerce(raw, getattr(obj, key), f"{section.name}.{key}")
    return dataclasses.replace(obj, **updates)


@dataclass
class RunConfig:
    synth: SynthConfig = field(default_factory=SynthConfig)
    data_path: Path | None = None
    vocab_max: int = 10000
    backbone: BackboneConfig = field(default_factory=lambda: BackboneConfig(
        num_layers=2, hidden_dim=32, num_heads=2, ffn_dim=64, max_seq_len=64))
    dsn: DsnConfig = field(default_factory=lambda: DsnConfig(
        "template", tap_frequency=1, ladder_dim=16, ladder_ffn_dim=32, gate_dim=16, tower_dims=(32, 16)))
    dsn_overrides: dict[str, dict] = field(default_factory=dict)
    new_domains: tuple[str, ...] = ()
    general_tower_dims: tuple[int, ...] = (32, 16)
    train: TrainConfig = field(default_factory=TrainConfig)
    out_dir: Path = Path("run")
    seed: int = 0

    def model_config(self, vocab_size: int) -> ModelConfig:
        return ModelConfig(
            backbone=dataclasses.replace(self.backbone, vocab_size=vocab_size),
            dsn=self.dsn,
            dsn_overrides=self.dsn_overrides,
            general_tower_dims=self.general_tower_dims,
            seed=self.seed,
        )

    def with_seed(self, seed: int) -> "RunConfig":
        return dataclasses.replace(
            self,
            seed=seed,
            synth=dataclasses.replace(self.synth, seed=seed),
            train=dataclasses.replace(self.train, seed=seed),
        )

    def check_domains(self, dataset_domains) -> None:
        """Every ``[dsn.<name>]`` must name a dataset domain or one declared new."""
        present = set(dataset_domains) | set(self.new_domains)
        missing = sorted(set(self.dsn_overrides) - present)
        if missing:
            raise ConfigError(f"[dsn.*] sections for domains not in the dataset: {missing} "
                              "(set new = true to declare a domain that will be added later)")


def load_run_config(path: str | Path | None) -> RunConfig:
    cfg = RunConfig()
    if path is None:
        return cfg
    path = Path(path)
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str  # keep key case
    try:
        with open(path, encoding="utf-8") as fh:
            parser.read_file(fh)
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e.strerror}") from None
    except configparser.Error as e:
        raise ConfigError(f"malformed config {path}: {e}") from None
    for name in parser.sections():
        if name not in KNOWN_SECTIONS and not name.startswith(DSN_SECTION):
            raise ConfigError(f"unknown section [{name}] in {path}")
    if parser.has_section("data"):
        sec = parser["data"]
        if "path" in sec:
            cfg.data_path = (path.parent / sec["path"]).resolve()
        if "vocab_max" in sec:
            cfg.vocab_max = _coerce(sec["vocab_max"], 0, "data.vocab_max")
        cfg.synth = _fill(cfg.synth, sec, skip=("path", "vocab_max"))
        cfg.seed = cfg.synth.seed
    if parser.has_section("backbone"):
        cfg.backbone = _fill(cfg.backbone, parser["backbone"])
    if parser.has_section("dsn"):
        cfg.dsn = _fill(cfg.dsn, parser["dsn"], skip=("domain_name",))
    new = []
    for name in parser.sections():
        if name.startswith(DSN_SECTION):
            domain = name[len(DSN_SECTION):]
            sec = parser[name]
            if "new" in sec and _coerce(sec["new"], False, f"{name}.new"):
                new.append(domain)
            filled = _fill(cfg.dsn, sec, skip=("new", "domain_name"))
            cfg.dsn_overrides[domain] = {
                f.name: getattr(filled, f.name) for f in dataclasses.fields(filled)
                if f.name in sec and f.name != "domain_name"
            }
    cfg.new_domains = tuple(new)
    if parser.has_section("general"):
        sec = parser["general"]
        for key in sec:
            if key != "tower_dims":
                raise ConfigError(f"[general] unknown key {key!r}; valid keys are ['tower_dims']")
        if "tower_dims" in sec:
            cfg.general_tower_dims = _coerce(sec["tower_dims"], (0,), "general.tower_dims")
    if parser.has_section("train"):
        if "seed" in parser["train"]:
            raise ConfigError("[train] seed is not accepted; the run seed comes from [data] seed or --seed")
        cfg.train = _fill(cfg.train, parser["train"])
    if parser.has_section("output"):
        sec = parser["output"]
        if "dir" in sec:
            cfg.out_dir = (path.parent / sec["dir"]).resolve()
    cfg.train = dataclasses.replace(cfg.train, seed=cfg.seed)
    return cfg
