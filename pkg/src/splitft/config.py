"""Experiment configuration: one JSON document, defaults, validation."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

from . import lora
from .allocate import RankPlan
from .errors import ConfigError, IoError
from .metrics import CostModel
from .model import ModelConfig

SEQUENTIAL = "sequential"
PARALLEL = "parallel"


@dataclass(frozen=True)
class DataConfig:
    n_samples: int = 2000
    len_range: tuple[int, int] = (17, 48)
    partition: str = "iid"  # "iid" | "dirichlet"
    alpha: float = 1.0
    k_categories: int = 8


@dataclass(frozen=True)
class FederationConfig:
    n_clients: int = 5
    rounds: int = 100
    local_steps: int = 1
    execution: str = SEQUENTIAL


@dataclass(frozen=True)
class LearningConfig:
    lr_client: float = 5e-5
    lr_server: float = 5e-5
    batch: int = 4


@dataclass(frozen=True)
class AllocationConfig:
    gamma: float = 0.5
    l_init: int = 2
    l_min: int = 1
    l_max: int | None = None  # defaults to layers - 1
    resize_policy: str = lora.PAD_TRUNCATE


@dataclass(frozen=True)
class ExperimentConfig:
    model: ModelConfig = field(default_factory=lambda: ModelConfig(
        vocab=64, dim=32, layers=8, seq_len=16, mixer=True))
    data: DataConfig = field(default_factory=DataConfig)
    federation: FederationConfig = field(default_factory=FederationConfig)
    ranks: RankPlan = field(default_factory=lambda: RankPlan(r_cut=8, r_others=16))
    learning: LearningConfig = field(default_factory=LearningConfig)
    allocation: AllocationConfig = field(default_factory=AllocationConfig)
    cost: CostModel = field(default_factory=CostModel)
    seed: int = 1

    @property
    def l_max(self) -> int:
        return self.allocation.l_max if self.allocation.l_max is not None else self.model.layers - 1

    def validate(self) -> "ExperimentConfig":
        self.model.validate()
        m = self.model.layers
        a = self.allocation
        if not 1 <= a.l_min <= a.l_init <= self.l_max <= m - 1:
            raise ConfigError(
                f"layer bounds 1 <= {a.l_min} <= {a.l_init} <= {self.l_max} <= {m - 1} violated"
            )
        if a.gamma < 0:
            raise ConfigError(f"allocation gamma must be >= 0, got {a.gamma}")
        if a.resize_policy not in (lora.PAD_TRUNCATE, lora.REINIT):
            raise ConfigError(f"unknown resize policy {a.resize_policy!r}")
        r = self.ranks
        if not (1 <= r.r_cut <= self.model.dim and 1 <= r.r_others <= self.model.dim):
            raise ConfigError(f"ranks ({r.r_cut}, {r.r_others}) out of range for dim {self.model.dim}")
        f = self.federation
        if f.n_clients < 1 or f.rounds < 0 or f.local_steps < 1:
            raise ConfigError("federation sizes must be positive (rounds may be 0)")
        if f.execution not in (SEQUENTIAL, PARALLEL):
            raise ConfigError(f"unknown execution mode {f.execution!r}")
        le = self.learning
        if le.lr_client < 0 or le.lr_server < 0 or le.batch < 1:
            raise ConfigError("learning rates must be >= 0 and batch >= 1")
        d = self.data
        if d.partition not in ("iid", "dirichlet"):
            raise ConfigError(f"unknown partition strategy {d.partition!r}")
        if d.alpha <= 0 or d.k_categories < 1 or d.n_samples < 1:
            raise ConfigError("data section values out of range")
        lo, hi = d.len_range
        if not 1 <= lo <= hi <= 512:
            raise ConfigError(f"len_range {d.len_range} out of range")
        self.cost.validate()
        return self


def to_dict(cfg: ExperimentConfig) -> dict[str, Any]:
    doc = asdict(cfg)
    doc["data"]["len_range"] = list(cfg.data.len_range)
    return doc


def _merge(base: dict, override: dict) -> dict:
    out = dict(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], value)
        else:
            out[key] = value
    return out


def from_dict(doc: dict[str, Any]) -> ExperimentConfig:
    defaults = to_dict(ExperimentConfig())
    doc = _merge(defaults, doc)
    try:
        cs = doc["cost"]["client_speed"]
        cfg = ExperimentConfig(
            model=ModelConfig(**doc["model"]),
            data=DataConfig(
                n_samples=doc["data"]["n_samples"],
                len_range=tuple(doc["data"]["len_range"]),
                partition=doc["data"]["partition"],
                alpha=doc["data"]["alpha"],
                k_categories=doc["data"]["k_categories"],
            ),
            federation=FederationConfig(**doc["federation"]),
            ranks=RankPlan(**doc["ranks"]),
            learning=LearningConfig(**doc["learning"]),
            allocation=AllocationConfig(**doc["allocation"]),
            cost=CostModel(
                client_speed=tuple(cs) if isinstance(cs, (list, tuple)) else cs,
                server_speed=doc["cost"]["server_speed"],
                bandwidth=doc["cost"]["bandwidth"],
            ),
            seed=doc["seed"],
        )
    except (KeyError, TypeError) as exc:
        raise ConfigError(f"malformed configuration: {exc}") from exc
    return cfg.validate()


def load(path: str | Path) -> ExperimentConfig:
    try:
        doc = json.loads(Path(path).read_text())
    except OSError as exc:
        raise IoError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    return from_dict(doc)
