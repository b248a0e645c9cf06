"""Backbone + general head + pluggable per-domain networks."""
from __future__ import annotations

import copy
from collections import OrderedDict
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .backbone import Backbone, BackboneConfig, TapSet
from .checkpoint import checksum, section_of
from .dsn import DomainSpecificNetwork, DsnConfig
from .errors import ConfigError, RegistryError
from .general import GeneralHead
from .nn import Module, Parameter


@dataclass
class ModelConfig:
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    dsn: DsnConfig = field(default_factory=lambda: DsnConfig(domain_name="default"))
    dsn_overrides: dict[str, dict] = field(default_factory=dict)
    general_tower_dims: tuple[int, ...] = (64, 32, 16)
    seed: int = 0

    def dsn_config(self, domain: str) -> DsnConfig:
        return replace(self.dsn, domain_name=domain, **self.dsn_overrides.get(domain, {}))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["general_tower_dims"] = list(self.general_tower_dims)
        d["dsn"]["tower_dims"] = list(self.dsn.tower_dims)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        dsn = dict(d["dsn"])
        dsn["tower_dims"] = tuple(dsn["tower_dims"])
        return cls(
            backbone=BackboneConfig(**d["backbone"]),
            dsn=DsnConfig(**dsn),
            dsn_overrides={k: dict(v) for k, v in d.get("dsn_overrides", {}).items()},
            general_tower_dims=tuple(d["general_tower_dims"]),
            seed=d.get("seed", 0),
        )


class DsnBank(Module):
    """Ordered registry of domain networks; order defines domain indices."""

    def names(self) -> list[str]:
        return list(self._children)

    def __getitem__(self, name: str) -> DomainSpecificNetwork:
        return self._children[name]

    def __contains__(self, name: str) -> bool:
        return name in self._children

    def __len__(self) -> int:
        return len(self._children)

    def values(self) -> list[DomainSpecificNetwork]:
        return list(self._children.values())

    def add(self, dsn: DomainSpecificNetwork) -> None:
        self._children[dsn.name] = dsn
        object.__setattr__(self, dsn.name, dsn)

    def remove(self, name: str) -> DomainSpecificNetwork:
        dsn = self._children.pop(name)
        object.__delattr__(self, name)
        return dsn


class MultiDomainModel(Module):
    def __init__(self, cfg: ModelConfig, domains: list[str] = ()):
        super().__init__()
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        self.backbone = Backbone(cfg.backbone, rng)
        self.general = GeneralHead(cfg.backbone.hidden_dim, cfg.general_tower_dims, rng,
                                   cfg.backbone.pooling, cfg.dsn.dropout)
        self.dsns = DsnBank()
        for name in domains:
            self.attach(self.new_dsn(name))

    # registry -------------------------------------------------------------
    @property
    def domains(self) -> list[str]:
        return self.dsns.names()

    def new_dsn(self, name: str) -> DomainSpecificNetwork:
        # per-domain generator so a DSN's init does not depend on attach order
        seed = [self.cfg.seed, *name.encode()]
        dsn = DomainSpecificNetwork(self.cfg.dsn_config(name), self.cfg.backbone, np.random.default_rng(seed))
        dtype = self.backbone.tok.weight.dtype
        if dtype != np.float32:
            dsn.to_precision(64)
        return dsn

    def attach(self, dsn: DomainSpecificNetwork) -> None:
        if dsn.name in self.dsns:
            raise RegistryError(f"domain {dsn.name!r} already has a DSN")
        if dsn.num_layers != self.cfg.backbone.num_layers:
            raise RegistryError(f"DSN {dsn.name!r} was built for {dsn.num_layers} layers")
        if dsn.num_parameters() >= self.backbone.num_parameters():
            raise ConfigError(
                f"DSN {dsn.name!r} has {dsn.num_parameters()} parameters, not fewer than the "
                f"backbone's {self.backbone.num_parameters()}"
            )
        self.dsns.add(dsn)

    def detach(self, name: str) -> DomainSpecificNetwork:
        if name not in self.dsns:
            raise RegistryError(f"no DSN registered for domain {name!r}")
        return self.dsns.remove(name)

    # parameter groups -----------------------------------------------------
    def groups(self) -> "OrderedDict[str, OrderedDict[str, Parameter]]":
        out: OrderedDict[str, OrderedDict[str, Parameter]] = OrderedDict()
        for name, p in self.named_parameters():
            out.setdefault(section_of(name), OrderedDict())[name] = p
        return out

    def group_of(self, domain: str) -> str:
        return "dsn." + domain

    def freeze(self, group: str) -> None:
        for p in self._group(group).values():
            p.requires_grad = False
        if group.startswith("dsn."):
            self.dsns[group[4:]].frozen = True

    def unfreeze(self, group: str) -> None:
        for p in self._group(group).values():
            p.requires_grad = True
        if group.startswith("dsn."):
            self.dsns[group[4:]].frozen = False

    def _group(self, group: str) -> "OrderedDict[str, Parameter]":
        groups = self.groups()
        if group not in groups:
            raise RegistryError(f"unknown parameter group {group!r}; have {list(groups)}")
        return groups[group]

    def frozen_groups(self) -> list[str]:
        return [g for g, ps in self.groups().items() if not any(p.requires_grad for p in ps.values())]

    def trainable(self) -> "OrderedDict[str, Parameter]":
        return OrderedDict((k, p) for k, p in self.named_parameters() if p.requires_grad)

    def checksums(self) -> dict[str, str]:
        return {g: checksum({k: p.data for k, p in ps.items()}) for g, ps in self.groups().items()}

    # forward --------------------------------------------------------------
    def taps(self, ids: np.ndarray, mask: np.ndarray) -> TapSet:
        return self.backbone(ids, mask)

    def clone(self) -> "MultiDomainModel":
        return copy.deepcopy(self)
