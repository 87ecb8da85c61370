"""Experiment configuration: one dataclass, one JSON document, field-level
validation."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, asdict

from .datagen import SizeProfile, SuiteSpec

METHODS = ("mas", "all_in_one", "one_by_one", "standalone")


class ConfigError(ValueError):
    """Invalid configuration; the message names the offending field."""


@dataclass
class ExperimentConfig:
    """Everything one run needs.  Defaults follow the reference setup:
    K=4 selected of N=32 clients, E=1 local epoch, R=100 rounds with R0=30
    merged rounds, split driven by round-10 affinities, affinity every 5
    batches, SGD lr 0.1 / momentum 0.9 / weight decay 1e-4 with polynomial
    decay."""

    method: str = "mas"
    seed: int = 0
    rounds: int = 100  # R: total training rounds
    r0: int = 30  # merged-phase rounds before the split
    score_round: int = 10  # round whose affinity matrix drives the split
    splits: int = 2  # x: number of non-overlapping task groups
    rho: int = 5  # measure affinity every rho batches; 0 disables
    clients: int = 32  # N: client pool size
    select: int = 4  # K: clients selected per round
    epochs: int = 1  # E: local epochs per round
    batch_size: int = 16
    base_lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 1e-4
    hidden_dims: tuple[int, int] = (32, 32)
    weighted_affinity: bool = False  # weight client affinities by dataset size
    split_client_pools: bool = False  # what-if: disjoint client pools per split
    suite: SuiteSpec = field(default_factory=SuiteSpec)

    def validate(self) -> None:
        if self.method not in METHODS:
            raise ConfigError(f"method: {self.method!r} not in {METHODS}")
        if self.seed < 0:
            raise ConfigError(f"seed: must be >= 0, got {self.seed}")
        if self.rounds < 1:
            raise ConfigError(f"rounds: must be >= 1, got {self.rounds}")
        if not 0 <= self.r0 <= self.rounds:
            raise ConfigError(f"r0: must be in [0, rounds={self.rounds}], got {self.r0}")
        if not 1 <= self.select <= self.clients:
            raise ConfigError(
                f"select: must be in [1, clients={self.clients}], got {self.select}"
            )
        if self.epochs < 1:
            raise ConfigError(f"epochs: must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size: must be >= 1, got {self.batch_size}")
        if self.rho < 0:
            raise ConfigError(f"rho: must be >= 0, got {self.rho}")
        if self.base_lr <= 0:
            raise ConfigError(f"base_lr: must be > 0, got {self.base_lr}")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError(f"momentum: must be in [0, 1), got {self.momentum}")
        if self.weight_decay < 0:
            raise ConfigError(f"weight_decay: must be >= 0, got {self.weight_decay}")
        if len(self.hidden_dims) != 2 or any(h < 1 for h in self.hidden_dims):
            raise ConfigError(f"hidden_dims: need two positive dims, got {self.hidden_dims}")
        if self.method == "mas":
            if self.splits < 2:
                raise ConfigError(f"splits: mas needs >= 2, got {self.splits}")
            if self.splits > self.suite.n_tasks:
                raise ConfigError(
                    f"splits: {self.splits} exceeds task count {self.suite.n_tasks}"
                )
            if self.r0 < 1:
                raise ConfigError(f"r0: mas needs at least one merged round, got {self.r0}")
            if not 1 <= self.score_round <= self.r0:
                raise ConfigError(
                    f"score_round: must be in [1, r0={self.r0}], got {self.score_round}"
                )
            if self.rho < 1:
                raise ConfigError("rho: mas needs rho >= 1 to measure affinities")
            if self.split_client_pools and self.select > self.clients // self.splits:
                raise ConfigError(
                    f"select: {self.select} exceeds per-split pool size "
                    f"{self.clients // self.splits} with split_client_pools on"
                )

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden_dims"] = list(self.hidden_dims)
        return d

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        data = dict(data)
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config fields: {sorted(unknown)}")
        if "hidden_dims" in data:
            data["hidden_dims"] = tuple(data["hidden_dims"])
        if "suite" in data and isinstance(data["suite"], dict):
            data["suite"] = _suite_from_dict(data["suite"])
        try:
            return cls(**data)
        except (ValueError, TypeError) as exc:
            raise ConfigError(str(exc)) from exc

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()


def _suite_from_dict(data: dict) -> SuiteSpec:
    data = dict(data)
    known = {f for f in SuiteSpec.__dataclass_fields__}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"unknown suite fields: {sorted(unknown)}")
    if "profile" in data and isinstance(data["profile"], dict):
        data["profile"] = SizeProfile(**data["profile"])
    if "clusters" in data and data["clusters"] is not None:
        data["clusters"] = tuple(data["clusters"])
    if "duplicates" in data:
        data["duplicates"] = tuple((a, b) for a, b in data["duplicates"])
    if "negated" in data:
        data["negated"] = tuple(data["negated"])
    try:
        return SuiteSpec(**data)
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"suite: {exc}") from exc


def load_config(path: str) -> ExperimentConfig:
    with open(path) as fh:
        try:
            data = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path}: {exc}") from exc
    return ExperimentConfig.from_dict(data)
