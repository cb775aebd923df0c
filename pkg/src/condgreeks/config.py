"""Run configuration: strict schema, TOML input, environment overrides.

A config file has the sections below; every key is optional and unknown
keys are rejected. ``RunConfig.to_dict`` materialises all defaults, and
that dict is what gets written into run manifests. A manifest (JSON with a
``config`` entry) is itself accepted as a config file.

Environment variables ``CONDGREEKS__<SECTION>__<KEY>=<value>`` override
file values; the value is parsed as a TOML literal when possible.
"""

from __future__ import annotations

import dataclasses
import json
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .errors import ConfigError

ENV_PREFIX = "CONDGREEKS__"


@dataclass
class ModelSection:
    name: str = "bs"


@dataclass
class BsSection:
    S0: float = 100.0
    r: float = 0.05
    theta: float = 0.2
    K: float = 95.0
    s: float = 90.0


@dataclass
class GridSection:
    T: float = 1.0
    M: int = 64


@dataclass
class McSection:
    N: int = 200_000
    master_seed: int = 0
    shards: int = 1
    block_size: int = 25_000


@dataclass
class EstimatorSection:
    method: str = "malliavin"
    # "auto" selects the N^(-1/5) rule of thumb
    bandwidth: Any = "auto"


@dataclass
class GradientSection:
    method: str = "wd"
    branch_law: str = "uniform"


@dataclass
class ConvergenceSection:
    N_list: list = field(default_factory=lambda: [100, 1000, 10_000, 100_000])
    reps: int = 20
    kernel: bool = False


@dataclass
class VarianceSection:
    T_list: list = field(default_factory=lambda: [1.0, 2.0, 4.0, 8.0])
    dt: float = 1.0 / 64
    N: int = 100_000
    bootstrap: int = 200
    estimators: list = field(default_factory=lambda: ["wd", "score"])


@dataclass
class GreekSection:
    compare: bool = True


@dataclass
class SgdSection:
    theta0: float = 0.35
    theta_star: float = 0.2
    step: float = 2e-4
    iters: int = 30
    N: int = 200_000
    box_lo: float = 0.1
    box_hi: float = 1.0
    decreasing: bool = False


@dataclass
class HjCheckSection:
    dm: list = field(default_factory=lambda: [-1.0, -0.3, 0.0, 0.3, 1.0])
    ds: list = field(default_factory=lambda: [-1.0, -0.2, 0.0, 0.2, 1.0])
    m: list = field(default_factory=lambda: [-1.0, 0.0, 2.0])
    s: list = field(default_factory=lambda: [0.05, 1.0, 5.0])
    h: list = field(default_factory=lambda: [1e-2, 1e-3])


@dataclass
class RunConfig:
    model: ModelSection = field(default_factory=ModelSection)
    bs: BsSection = field(default_factory=BsSection)
    grid: GridSection = field(default_factory=GridSection)
    mc: McSection = field(default_factory=McSection)
    estimator: EstimatorSection = field(default_factory=EstimatorSection)
    gradient: GradientSection = field(default_factory=GradientSection)
    convergence: ConvergenceSection = field(default_factory=ConvergenceSection)
    variance: VarianceSection = field(default_factory=VarianceSection)
    greek: GreekSection = field(default_factory=GreekSection)
    sgd: SgdSection = field(default_factory=SgdSection)
    hj_check: HjCheckSection = field(default_factory=HjCheckSection)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


_SECTIONS = {f.name: f.default_factory for f in dataclasses.fields(RunConfig)}

_CHOICES = {
    ("model", "name"): ("bs",),
    ("estimator", "method"): ("malliavin", "kernel"),
    ("gradient", "method"): ("wd", "score"),
    ("gradient", "branch_law"): ("uniform", "linear"),
}


def _coerce(section: str, key: str, default, value):
    where = f"{section}.{key}"
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{where} must be a boolean, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            if isinstance(value, float) and value.is_integer():
                return int(value)
            raise ConfigError(f"{where} must be an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where} must be a number, got {value!r}")
        return float(value)
    if isinstance(default, str) and (section, key) in _CHOICES:
        if value not in _CHOICES[(section, key)]:
            raise ConfigError(f"{where} must be one of {_CHOICES[(section, key)]}, got {value!r}")
        return value
    if isinstance(default, list):
        if not isinstance(value, list):
            raise ConfigError(f"{where} must be a list, got {value!r}")
        proto = default[0] if default else None
        if isinstance(proto, (int, float)) and not isinstance(proto, bool):
            if not all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in value):
                raise ConfigError(f"{where} must be a list of numbers, got {value!r}")
            if isinstance(proto, float):
                return [float(v) for v in value]
            if not all(float(v).is_integer() for v in value):
                raise ConfigError(f"{where} must be a list of integers, got {value!r}")
            return [int(v) for v in value]
        return list(value)
    if section == "estimator" and key == "bandwidth":
        if value == "auto":
            return value
        if isinstance(value, bool) or not isinstance(value, (int, float)) or not value > 0:
            raise ConfigError(f"{where} must be \"auto\" or a positive number, got {value!r}")
        return float(value)
    return value


def _validate(cfg: RunConfig) -> RunConfig:
    checks = [
        (cfg.grid.T > 0, "grid.T must be positive"),
        (cfg.grid.M >= 2, "grid.M must be >= 2"),
        (cfg.mc.N >= 0, "mc.N must be non-negative"),
        (cfg.mc.shards >= 1, "mc.shards must be >= 1"),
        (cfg.mc.block_size >= 1, "mc.block_size must be >= 1"),
        (0 <= cfg.mc.master_seed < 2 ** 64, "mc.master_seed must fit in an unsigned 64-bit integer"),
        (cfg.convergence.reps >= 1, "convergence.reps must be >= 1"),
        (all(n >= 2 for n in cfg.convergence.N_list), "convergence.N_list entries must be >= 2"),
        (cfg.variance.dt > 0, "variance.dt must be positive"),
        (all(t > 0 for t in cfg.variance.T_list), "variance.T_list entries must be positive"),
        (set(cfg.variance.estimators) <= {"wd", "score"}, "variance.estimators must be drawn from wd, score"),
        (cfg.sgd.step >= 0, "sgd.step must be non-negative"),
        (cfg.sgd.box_lo < cfg.sgd.box_hi, "sgd.box_lo must be below sgd.box_hi"),
        (cfg.sgd.box_lo > 0, "sgd.box_lo must be positive (theta is a volatility)"),
        (cfg.sgd.iters >= 0, "sgd.iters must be non-negative"),
        (all(v > 0 for v in cfg.hj_check.s), "hj_check.s entries must be positive"),
    ]
    for ok, msg in checks:
        if not ok:
            raise ConfigError(msg)
    return cfg


def from_dict(data: dict) -> RunConfig:
    if not isinstance(data, dict):
        raise ConfigError("config root must be a table")
    sections = {}
    for name, body in data.items():
        if name not in _SECTIONS:
            raise ConfigError(f"unknown config section [{name}]")
        if not isinstance(body, dict):
            raise ConfigError(f"[{name}] must be a table")
        proto = _SECTIONS[name]()
        known = {f.name: getattr(proto, f.name) for f in dataclasses.fields(proto)}
        values = {}
        for key, value in body.items():
            if key not in known:
                raise ConfigError(f"unknown config key {name}.{key}")
            values[key] = _coerce(name, key, known[key], value)
        sections[name] = dataclasses.replace(proto, **values)
    return _validate(RunConfig(**sections))


def _parse_env_value(raw: str):
    try:
        return tomllib.loads(f"v = {raw}")["v"]
    except tomllib.TOMLDecodeError:
        return raw


def env_overrides(environ=None) -> dict:
    environ = os.environ if environ is None else environ
    out: dict = {}
    for name, raw in environ.items():
        if not name.startswith(ENV_PREFIX):
            continue
        parts = name[len(ENV_PREFIX):].lower().split("__")
        if len(parts) != 2:
            raise ConfigError(f"environment override {name} must look like {ENV_PREFIX}SECTION__KEY")
        section, key = parts
        # keys such as N, T, M, S0, K keep their case in the schema
        proto = _SECTIONS.get(section)
        if proto is not None:
            for f in dataclasses.fields(proto()):
                if f.name.lower() == key:
                    key = f.name
        out.setdefault(section, {})[key] = _parse_env_value(raw)
    return out


def _merge(base: dict, over: dict) -> dict:
    out = {k: dict(v) if isinstance(v, dict) else v for k, v in base.items()}
    for sec, body in over.items():
        out.setdefault(sec, {})
        if isinstance(out[sec], dict) and isinstance(body, dict):
            out[sec].update(body)
        else:
            out[sec] = body
    return out


def read_config_file(path: str | Path) -> dict:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    if path.suffix == ".json":
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON: {exc}") from exc
        # run manifests carry the resolved config under "config"
        return data["config"] if isinstance(data, dict) and "config" in data else data
    try:
        return tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: invalid TOML: {exc}") from exc


def load_config(path: str | Path | None = None, environ=None, overrides: dict | None = None) -> RunConfig:
    """File values, then environment overrides, then explicit overrides."""
    data = read_config_file(path) if path is not None else {}
    data = _merge(data, env_overrides(environ))
    if overrides:
        data = _merge(data, overrides)
    return from_dict(data)
