"""YAML experiment configuration with validation and override precedence.

Precedence for the seed base: ``--seed`` flag, then ``MOSHPIT_SEED``, then
the file.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any

import yaml

from ..core import GridConfig
from ..protocols import DEFAULT_CAP, DEFAULT_THRESHOLDS, ProtocolKind

SEED_ENV = "MOSHPIT_SEED"


class ConfigError(ValueError):
    pass


def _floats(values, what: str) -> tuple[float, ...]:
    try:
        return tuple(float(v) for v in values)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{what}: expected a list of numbers") from exc


def _ints(values, what: str) -> tuple[int, ...]:
    try:
        out = tuple(int(v) for v in values)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{what}: expected a list of integers") from exc
    return out


def _as_list(value):
    return list(value) if isinstance(value, (list, tuple)) else [value]


@dataclass(frozen=True)
class ExperimentConfig:
    protocols: tuple[str, ...] = tuple(k.value for k in ProtocolKind)
    N: tuple[int, ...] = (512,)
    M: int = 32
    d: int = 2
    p: tuple[float, ...] = (0.0,)
    seeds: int = 100
    seed_base: int = 0
    cap: int = DEFAULT_CAP
    thresholds: tuple[float, ...] = DEFAULT_THRESHOLDS
    out: str = "results.csv"
    jobs: int = 1
    options: dict[str, dict[str, Any]] = field(default_factory=dict)

    def validate(self) -> "ExperimentConfig":
        try:
            kinds = [ProtocolKind(p) for p in self.protocols]
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        if not kinds:
            raise ConfigError("no protocols selected")
        try:
            grid = GridConfig(self.M, self.d)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        for n in self.N:
            if n < 1:
                raise ConfigError(f"N={n} must be >= 1")
            if ProtocolKind.MOSHPIT in kinds and n > grid.capacity:
                raise ConfigError(f"N={n} exceeds grid capacity {grid.capacity} for moshpit")
            if ProtocolKind.GOSSIP in kinds and n < 3:
                raise ConfigError("gossip needs N >= 3")
            if ProtocolKind.PUSHSUM in kinds and n < 2:
                raise ConfigError("pushsum needs N >= 2")
        for p in self.p:
            if not 0.0 <= p <= 1.0:
                raise ConfigError(f"p={p} outside [0, 1]")
        if self.seeds < 1 or self.cap < 1 or self.jobs < 1:
            raise ConfigError("seeds, cap and jobs must be >= 1")
        if not self.thresholds or any(t <= 0 for t in self.thresholds):
            raise ConfigError("thresholds must be positive")
        unknown = set(self.options) - {k.value for k in kinds}
        if unknown:
            raise ConfigError(f"options given for unselected protocols: {sorted(unknown)}")
        return self


@dataclass(frozen=True)
class SgdSettings:
    objective: str = "quadratic"
    dim: int = 4
    L: float = 2.0
    mu: float = 0.5
    b: float = 10.0
    reg: float = 0.1
    samples: int = 200
    gamma: float = 0.1
    tau: int = 4
    steps: int = 200
    M: int = 4
    d: int = 2
    n_peers: int | None = None
    sigma: float = 0.5
    p: float = 0.0
    inner_rounds: int | None = None
    init_spread: float = 0.0
    churn: tuple[tuple[int, int], ...] = ()
    seeds: int = 10
    seed_base: int = 0
    epsilon: float = 1e-3
    out: str = "sgd.csv"
    jobs: int = 1


def load_yaml(path: str | os.PathLike | None) -> dict:
    if path is None:
        return {}
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        data = yaml.safe_load(text) or {}
    except yaml.YAMLError as exc:
        raise ConfigError(f"malformed YAML in {path}: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError("config root must be a mapping")
    return data


def _seed_override(seed_flag: int | None) -> int | None:
    if seed_flag is not None:
        return seed_flag
    env = os.environ.get(SEED_ENV)
    if env is None or env == "":
        return None
    try:
        return int(env)
    except ValueError as exc:
        raise ConfigError(f"{SEED_ENV}={env!r} is not an integer") from exc


def experiment_from_dict(data: dict, *, seed=None, out=None, jobs=None) -> ExperimentConfig:
    section = data.get("experiment", data)
    if not isinstance(section, dict):
        raise ConfigError("'experiment' must be a mapping")
    known = {"protocols", "N", "grid", "M", "d", "p", "seeds", "seed_base", "cap", "thresholds", "out", "jobs", "options"}
    extra = set(section) - known
    if extra:
        raise ConfigError(f"unknown experiment keys: {sorted(extra)}")
    grid = section.get("grid", {}) or {}
    try:
        cfg = ExperimentConfig(
            protocols=tuple(str(p) for p in _as_list(section.get("protocols", ExperimentConfig.protocols))),
            N=_ints(_as_list(section.get("N", [512])), "N"),
            M=int(grid.get("M", section.get("M", 32))),
            d=int(grid.get("d", section.get("d", 2))),
            p=_floats(_as_list(section.get("p", [0.0])), "p"),
            seeds=int(section.get("seeds", 100)),
            seed_base=int(section.get("seed_base", 0)),
            cap=int(section.get("cap", DEFAULT_CAP)),
            thresholds=_floats(_as_list(section.get("thresholds", list(DEFAULT_THRESHOLDS))), "thresholds"),
            out=str(section.get("out", "results.csv")),
            jobs=int(section.get("jobs", 1)),
            options={str(k): dict(v or {}) for k, v in (section.get("options") or {}).items()},
        )
    except (TypeError, ValueError, AttributeError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"invalid experiment config: {exc}") from exc
    override = _seed_override(seed)
    if override is not None:
        cfg = replace(cfg, seed_base=override)
    if out is not None:
        cfg = replace(cfg, out=str(out))
    if jobs is not None:
        cfg = replace(cfg, jobs=int(jobs))
    return cfg.validate()


def sgd_from_dict(data: dict, *, seed=None, out=None, jobs=None) -> SgdSettings:
    section = data.get("sgd", data)
    if not isinstance(section, dict):
        raise ConfigError("'sgd' must be a mapping")
    fields = set(SgdSettings.__dataclass_fields__)
    extra = set(section) - fields
    if extra:
        raise ConfigError(f"unknown sgd keys: {sorted(extra)}")
    values = dict(section)
    if "churn" in values:
        try:
            values["churn"] = tuple((int(k), int(v)) for k, v in values["churn"])
        except (TypeError, ValueError) as exc:
            raise ConfigError("churn must be a list of [step, delta] pairs") from exc
    try:
        cfg = SgdSettings(**values)
        for name in ("gamma", "L", "mu", "sigma", "p", "epsilon", "init_spread", "b", "reg"):
            object.__setattr__(cfg, name, float(getattr(cfg, name)))
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid sgd config: {exc}") from exc
    if cfg.objective not in ("quadratic", "logistic", "rosenbrock"):
        raise ConfigError(f"unknown objective {cfg.objective!r}")
    if cfg.seeds < 1 or cfg.jobs < 1:
        raise ConfigError("seeds and jobs must be >= 1")
    override = _seed_override(seed)
    if override is not None:
        cfg = replace(cfg, seed_base=override)
    if out is not None:
        cfg = replace(cfg, out=str(out))
    if jobs is not None:
        cfg = replace(cfg, jobs=int(jobs))
    return cfg
