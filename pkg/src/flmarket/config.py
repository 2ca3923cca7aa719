"""Scenario configuration: a YAML key/value tree mapped onto nested dataclasses."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

ARMS = ("proposed", "baseline", "info-symmetry", "conv-fl")


class ConfigError(ValueError):
    """Configuration failed schema or feasibility validation."""


@dataclass
class MarketSection:
    types: list[float] = field(default_factory=lambda: [float(t) for t in range(1, 11)])
    prior: list[float] | None = None      # None: uniform
    d_max_enc: float = 5e5


@dataclass
class PricingSection:
    alpha_enc: float = 0.001
    alpha_local: float = 0.005
    upsilon_enc: float = 0.125
    upsilon_local: float = 3.0
    beta_priv: float = 1.0
    gamma_tx: float = 1e-4
    zeta_map: float = 0.5e-26
    cycles_map: float = 4488.0
    freq_map: float = 2e9


@dataclass
class UsersSection:
    roster: str | None = None             # CSV roster; None: seeded synthetic roster
    n_candidates: int = 100
    n_select: int = 10
    w_data: float = 1 / 3
    w_compute: float = 1 / 3
    w_rate: float = 1 / 3
    d_total: list[float] = field(default_factory=lambda: [2e4, 6e4])
    local_cap_frac: list[float] = field(default_factory=lambda: [0.2, 0.5])
    eps_priv: list[float] = field(default_factory=lambda: [0.1, 1.0])
    compute: list[float] = field(default_factory=lambda: [0.5, 1.5])
    rate: list[float] = field(default_factory=lambda: [100e6, 400e6])
    a_fn: float = 10.0
    zeta: float = 0.5e-26
    cycles_per_sample: float = 44880.0
    freq: float = 2e9


@dataclass
class SolverSection:
    sigma: float = 1e-6
    grid_step: float = 100.0
    max_iters: int = 100
    local_upward: bool = True


@dataclass
class DataSection:
    csv: str | None = None                # external dataset; None: synthetic
    n_samples: int = 5000
    d: int = 8
    k: int = 1
    noise_sigma: float = 0.1


@dataclass
class TrainingSection:
    rounds: int = 300
    optimizer: str = "adam"
    lr: float = 0.01
    lr_decay: float = 0.0
    local_iters: int = 1
    tol: float = 1e-7
    patience: int = 10


@dataclass
class StragglerSection:
    mode: str = "prob"
    value: float = 0.5


@dataclass
class ConvFlSection:
    quorum: int = 5


@dataclass
class ScenarioConfig:
    seed: int = 0
    realized_type: int = 9                # 0-based index into market.types
    arms: list[str] = field(default_factory=lambda: list(ARMS))
    market: MarketSection = field(default_factory=MarketSection)
    pricing: PricingSection = field(default_factory=PricingSection)
    users: UsersSection = field(default_factory=UsersSection)
    solver: SolverSection = field(default_factory=SolverSection)
    data: DataSection = field(default_factory=DataSection)
    training: TrainingSection = field(default_factory=TrainingSection)
    straggler: StragglerSection = field(default_factory=StragglerSection)
    conv_fl: ConvFlSection = field(default_factory=ConvFlSection)


def _build(cls, data: Any, path: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{path or 'config'}: expected a mapping")
    names = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - set(names))
    if unknown:
        raise ConfigError(f"{path or 'config'}: unknown keys {unknown}")
    kwargs = {}
    for key, value in data.items():
        default = getattr(cls(), key)
        where = f"{path}.{key}" if path else key
        if dataclasses.is_dataclass(default):
            kwargs[key] = _build(type(default), value, where)
        else:
            kwargs[key] = _coerce(default, value, where, str(names[key].type))
    return cls(**kwargs)


def _coerce(default: Any, value: Any, where: str, annotation: str):
    if value is None:
        return None
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected a boolean")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}: expected an integer")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected a number")
        return float(value)
    if isinstance(default, list) or default is None and annotation.startswith("list"):
        if not isinstance(value, list):
            raise ConfigError(f"{where}: expected a list")
        if default and isinstance(default[0], str):
            return [str(v) for v in value]
        try:
            return [float(v) for v in value]
        except (TypeError, ValueError):
            raise ConfigError(f"{where}: expected a list of numbers") from None
    if isinstance(default, str) or default is None:
        if not isinstance(value, str):
            raise ConfigError(f"{where}: expected a string")
        return value
    raise ConfigError(f"{where}: unsupported value")


def from_dict(data: dict) -> ScenarioConfig:
    cfg = _build(ScenarioConfig, data or {}, "")
    validate(cfg)
    return cfg


def to_dict(cfg: ScenarioConfig) -> dict:
    return dataclasses.asdict(cfg)


def dumps(cfg: ScenarioConfig) -> str:
    return yaml.safe_dump(to_dict(cfg), sort_keys=False, default_flow_style=None)


def loads(text: str) -> ScenarioConfig:
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"invalid YAML: {exc}") from None
    return from_dict(data or {})


def load(path) -> ScenarioConfig:
    return loads(Path(path).read_text())


def apply_overrides(cfg: ScenarioConfig, overrides: list[str]) -> ScenarioConfig:
    """Apply ``a.b=value`` flags on top of a config; values are parsed as YAML scalars."""
    data = to_dict(cfg)
    for item in overrides:
        key, sep, raw = item.partition("=")
        if not sep or not key:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        node = data
        parts = key.split(".")
        for p in parts[:-1]:
            if not isinstance(node.get(p), dict):
                raise ConfigError(f"override {key!r}: unknown section {p!r}")
            node = node[p]
        if parts[-1] not in node:
            raise ConfigError(f"override {key!r}: unknown key")
        node[parts[-1]] = yaml.safe_load(raw)
    return from_dict(data)


def config_hash(cfg: ScenarioConfig) -> str:
    blob = json.dumps(to_dict(cfg), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()


def validate(cfg: ScenarioConfig) -> None:
    """Feasibility checks that must pass before any computation starts."""
    m, u, t = cfg.market, cfg.users, cfg.training
    if not m.types:
        raise ConfigError("market.types must not be empty")
    if any(b <= a for a, b in zip(m.types, m.types[1:])) or min(m.types) <= 0:
        raise ConfigError("market.types must be positive and strictly increasing")
    if m.prior is not None and (len(m.prior) != len(m.types) or min(m.prior) < 0
                                or abs(sum(m.prior) - 1) > 1e-9):
        raise ConfigError("market.prior must match market.types and sum to 1")
    if not 0 <= cfg.realized_type < len(m.types):
        raise ConfigError(f"realized_type must be in [0, {len(m.types) - 1}]")
    if not cfg.arms or any(a not in ARMS for a in cfg.arms) or len(set(cfg.arms)) != len(cfg.arms):
        raise ConfigError(f"arms must be distinct values from {list(ARMS)}")
    if u.roster is None and u.n_select > u.n_candidates:
        raise ConfigError(f"users.n_select ({u.n_select}) exceeds users.n_candidates ({u.n_candidates})")
    if u.n_select < 1:
        raise ConfigError("users.n_select must be at least 1")
    for name in ("d_total", "local_cap_frac", "eps_priv", "compute", "rate"):
        lo_hi = getattr(u, name)
        if len(lo_hi) != 2 or lo_hi[0] > lo_hi[1] or lo_hi[0] <= 0:
            raise ConfigError(f"users.{name} must be a positive [low, high] range")
    if u.local_cap_frac[1] > 1 or u.eps_priv[1] > 1:
        raise ConfigError("users.local_cap_frac and users.eps_priv must not exceed 1")
    if abs(u.w_data + u.w_compute + u.w_rate - 1) > 1e-12:
        raise ConfigError("users selection weights must sum to 1")
    if cfg.data.csv is None and cfg.data.n_samples < u.n_select:
        raise ConfigError("data.n_samples must be at least users.n_select")
    if t.optimizer not in ("sgd", "adam"):
        raise ConfigError("training.optimizer must be 'sgd' or 'adam'")
    if t.rounds < 1 or t.local_iters < 1 or t.patience < 1 or not t.lr > 0 or t.lr_decay < 0:
        raise ConfigError("training values out of range")
    s = cfg.straggler
    if s.mode == "prob":
        if not 0 <= s.value <= 1:
            raise ConfigError("straggler.value must be a probability in prob mode")
    elif s.mode == "fixed":
        if s.value != int(s.value) or not 0 <= s.value <= u.n_select:
            raise ConfigError("straggler.value must be an integer count <= users.n_select in fixed mode")
    else:
        raise ConfigError("straggler.mode must be 'prob' or 'fixed'")
    if not 0 <= cfg.conv_fl.quorum <= u.n_select:
        raise ConfigError("conv_fl.quorum must be in [0, users.n_select]")
    if cfg.solver.grid_step <= 0 or cfg.solver.sigma < 0 or cfg.solver.max_iters < 1:
        raise ConfigError("solver values out of range")
