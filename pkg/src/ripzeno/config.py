"""Run configuration: YAML parsing, validation, serialization and presets."""

from __future__ import annotations

import copy
import dataclasses
import math
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

import numpy as np
import yaml

from .errors import ConfigError
from .models import MultispinModelParams, RipModel, ToyModelParams, build_multispin_model, build_toy_model

COMMANDS = ("spectrum", "propagate", "trajectories", "correlation", "compare")
FORMATS = ("csv", "json")

_MODEL_FIELDS = {
    "toy": {f.name for f in dataclasses.fields(ToyModelParams)},
    "multispin": {f.name for f in dataclasses.fields(MultispinModelParams)},
}


@dataclass
class ModelConfig:
    kind: str = "toy"
    params: dict = field(default_factory=lambda: {"omega": 1.0, "Omega": 1.0, "k_S": 1.0, "k_T": 0.0})

    def build(self) -> RipModel:
        if self.kind == "toy":
            return build_toy_model(ToyModelParams(**self.params))
        return build_multispin_model(MultispinModelParams(**self.params))


@dataclass
class SpectrumConfig:
    k_values: Optional[list[float]] = None
    k_min: float = 0.1
    k_max: float = 1000.0
    n_k: int = 81
    spacing: str = "log"

    def grid(self) -> np.ndarray:
        if self.k_values is not None:
            return np.array(self.k_values, dtype=float)
        if self.spacing == "log":
            return np.logspace(math.log10(self.k_min), math.log10(self.k_max), self.n_k)
        return np.linspace(self.k_min, self.k_max, self.n_k)


@dataclass
class PropagateConfig:
    t_max: float = 50.0
    n_points: int = 1000
    dt_hint: Optional[float] = None
    k_values: Optional[list[float]] = None
    initial: str = "singlet"


@dataclass
class TrajectoriesConfig:
    t_max: float = 10.0
    dt: float = 0.005
    n_traj: int = 1000
    record_every: int = 1
    initial: str = "singlet"
    scheme: str = "midpoint"
    absorbing: bool = False
    dump_trajectories: bool = False


@dataclass
class CorrelationConfig:
    t_burn: float = 20.0
    t_window: float = 40.0
    dt: float = 0.005
    n_traj: int = 2000
    tau_max: float = 8.0
    n_tau: int = 81
    scheme: str = "midpoint"

    def tau_grid(self) -> np.ndarray:
        # snap to multiples of dt so every lag is an integer number of steps
        raw = np.linspace(0.0, self.tau_max, self.n_tau)
        return np.rint(raw / self.dt) * self.dt


@dataclass
class CompareConfig:
    k_values: list[float] = field(default_factory=lambda: [0.0, 10.0, 20.0, 30.0, 50.0, 70.0, 100.0])


@dataclass
class OutputConfig:
    path: Optional[str] = None
    format: str = "csv"


@dataclass
class RunConfig:
    command: str = "spectrum"
    model: ModelConfig = field(default_factory=ModelConfig)
    variant: str = "measurement"
    spectrum: SpectrumConfig = field(default_factory=SpectrumConfig)
    propagate: PropagateConfig = field(default_factory=PropagateConfig)
    trajectories: TrajectoriesConfig = field(default_factory=TrajectoriesConfig)
    correlation: CorrelationConfig = field(default_factory=CorrelationConfig)
    compare: CompareConfig = field(default_factory=CompareConfig)
    output: OutputConfig = field(default_factory=OutputConfig)
    seed: Optional[int] = None
    threads: int = 1

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def dumps(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False)


def _coerce(value, tp, path: str):
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if origin is typing.Union:
        if value is None and type(None) in args:
            return None
        inner = [a for a in args if a is not type(None)]
        return _coerce(value, inner[0], path)
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"expected true/false, got {value!r}", path)
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"expected an integer, got {value!r}", path)
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"expected a number, got {value!r}", path)
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(f"expected a string, got {value!r}", path)
        return value
    if origin is list:
        if not isinstance(value, list):
            raise ConfigError(f"expected a list, got {value!r}", path)
        return [_coerce(v, args[0], f"{path}[{i}]") for i, v in enumerate(value)]
    if tp is dict:
        if not isinstance(value, dict):
            raise ConfigError(f"expected a mapping, got {value!r}", path)
        return dict(value)
    if dataclasses.is_dataclass(tp):
        return _build(tp, value, path)
    raise ConfigError(f"unsupported field type {tp}", path)  # pragma: no cover


def _build(cls, data, path: str = ""):
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"expected a mapping, got {type(data).__name__}", path or "<root>")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    for key in data:
        if key not in names:
            raise ConfigError(f"unknown field (expected one of {sorted(names)})", f"{path}.{key}" if path else str(key))
    kwargs = {}
    for f in dataclasses.fields(cls):
        if f.name in data:
            sub = f"{path}.{f.name}" if path else f.name
            kwargs[f.name] = _coerce(data[f.name], hints[f.name], sub)
    return cls(**kwargs)


def _check_positive(value, path, allow_zero=False):
    ok = value >= 0 if allow_zero else value > 0
    if not (ok and math.isfinite(value)):
        raise ConfigError(f"must be {'non-negative' if allow_zero else 'positive'}, got {value}", path)


def validate(cfg: RunConfig) -> RunConfig:
    """Check cross-field constraints; raises ``ConfigError`` naming the field."""
    if cfg.command not in COMMANDS:
        raise ConfigError(f"unknown command {cfg.command!r}; expected one of {COMMANDS}", "command")
    if cfg.variant not in ("measurement", "haberkorn"):
        raise ConfigError(f"unknown variant {cfg.variant!r}; expected 'measurement' or 'haberkorn'", "variant")
    kind = cfg.model.kind
    if kind not in _MODEL_FIELDS:
        raise ConfigError(f"unknown model kind {kind!r}; expected 'toy' or 'multispin'", "model.kind")
    for key, value in cfg.model.params.items():
        if key not in _MODEL_FIELDS[kind]:
            raise ConfigError(f"not a {kind} model parameter (expected one of {sorted(_MODEL_FIELDS[kind])})", f"model.params.{key}")
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"expected a number, got {value!r}", f"model.params.{key}")
        cfg.model.params[key] = float(value)
    try:
        cfg.model.build()
    except ValueError as exc:
        raise ConfigError(str(exc), "model.params") from None
    if cfg.output.format not in FORMATS:
        raise ConfigError(f"expected one of {FORMATS}", "output.format")
    if cfg.threads < 1:
        raise ConfigError("must be at least 1", "threads")

    s = cfg.spectrum
    if s.k_values is not None:
        ks = np.array(s.k_values)
        if ks.size == 0 or np.any(ks < 0) or np.any(np.diff(ks) <= 0):
            raise ConfigError("must be a non-empty, non-negative, strictly increasing list", "spectrum.k_values")
    else:
        if s.spacing not in ("log", "linear"):
            raise ConfigError("expected 'log' or 'linear'", "spectrum.spacing")
        _check_positive(s.k_min, "spectrum.k_min", allow_zero=s.spacing == "linear")
        if not s.k_max > s.k_min:
            raise ConfigError("must exceed spectrum.k_min", "spectrum.k_max")
        if s.n_k < 2:
            raise ConfigError("must be at least 2", "spectrum.n_k")

    p = cfg.propagate
    _check_positive(p.t_max, "propagate.t_max")
    if p.n_points < 2:
        raise ConfigError("must be at least 2", "propagate.n_points")
    if p.dt_hint is not None:
        _check_positive(p.dt_hint, "propagate.dt_hint")
    if p.k_values is not None:
        for i, k in enumerate(p.k_values):
            _check_positive(k, f"propagate.k_values[{i}]", allow_zero=True)
    if p.initial not in ("singlet", "triplet", "mixed"):
        raise ConfigError("expected 'singlet', 'triplet' or 'mixed'", "propagate.initial")

    t = cfg.trajectories
    _check_positive(t.t_max, "trajectories.t_max")
    _check_positive(t.dt, "trajectories.dt")
    if t.n_traj < 1:
        raise ConfigError("must be at least 1", "trajectories.n_traj")
    if t.record_every < 1:
        raise ConfigError("must be at least 1", "trajectories.record_every")
    if t.initial not in ("singlet", "triplet", "superposition"):
        raise ConfigError("expected 'singlet', 'triplet' or 'superposition'", "trajectories.initial")
    if t.scheme not in ("midpoint", "first_order"):
        raise ConfigError("expected 'midpoint' or 'first_order'", "trajectories.scheme")

    c = cfg.correlation
    _check_positive(c.t_burn, "correlation.t_burn", allow_zero=True)
    _check_positive(c.t_window, "correlation.t_window")
    _check_positive(c.dt, "correlation.dt")
    _check_positive(c.tau_max, "correlation.tau_max", allow_zero=True)
    if c.n_traj < 2:
        raise ConfigError("must be at least 2", "correlation.n_traj")
    if c.n_tau < 1:
        raise ConfigError("must be at least 1", "correlation.n_tau")
    if c.scheme not in ("midpoint", "first_order"):
        raise ConfigError("expected 'midpoint' or 'first_order'", "correlation.scheme")

    ks = np.array(cfg.compare.k_values)
    if ks.size == 0 or np.any(ks < 0) or np.any(np.diff(ks) <= 0):
        raise ConfigError("must be a non-empty, non-negative, strictly increasing list", "compare.k_values")
    if cfg.command == "compare" and kind != "multispin":
        raise ConfigError("the compare command runs on the multispin model", "model.kind")
    if cfg.command in ("trajectories", "correlation") and cfg.seed is None:
        raise ConfigError("a seed is required for stochastic commands (set 'seed' or pass --seed)", "seed")
    return cfg


def from_dict(data) -> RunConfig:
    data = copy.deepcopy(data)
    model = data.get("model") if isinstance(data, dict) else None
    if isinstance(model, dict) and "params" not in model:
        # accept a flat model block: {kind: toy, omega: 1, ...}
        kind = model.get("kind", "toy")
        data["model"] = {"kind": kind, "params": {k: v for k, v in model.items() if k != "kind"}}
    return validate(_build(RunConfig, data))


def loads(text: str) -> RunConfig:
    try:
        data = yaml.safe_load(text)
    except yaml.MarkedYAMLError as exc:
        mark = exc.problem_mark
        where = f"line {mark.line + 1}, column {mark.column + 1}" if mark else "unknown position"
        raise ConfigError(f"YAML syntax error at {where}: {exc.problem}") from None
    return from_dict(data or {})


def load(path) -> RunConfig:
    p = Path(path)
    try:
        text = p.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config file: {exc}") from None
    return loads(text)


def _toy(omega=1.0, Omega=1.0, k_S=1.0, k_T=0.0):
    return ModelConfig("toy", {"omega": omega, "Omega": Omega, "k_S": k_S, "k_T": k_T})


def _multispin(a=1.0, b=0.0, k_S=1.0, k_T=0.0):
    return ModelConfig("multispin", {"hyperfine_a": a, "zeeman_b": b, "k_S": k_S, "k_T": k_T})


def preset(name: str) -> RunConfig:
    """Named built-in configurations for the standard runs and checks."""
    if name == "fig2ab":
        cfg = RunConfig(command="spectrum", model=_toy(), spectrum=SpectrumConfig(k_min=0.1, k_max=1000.0, n_k=81))
    elif name == "fig2c":
        cfg = RunConfig(
            command="propagate",
            model=_toy(),
            propagate=PropagateConfig(t_max=200.0, n_points=2001, k_values=[0.1, 1.0, 20.0]),
        )
    elif name == "unraveling":
        cfg = RunConfig(
            command="trajectories",
            model=_toy(),
            trajectories=TrajectoriesConfig(t_max=10.0, dt=0.005, n_traj=10000),
            seed=1,
        )
    elif name == "correlation":
        cfg = RunConfig(command="correlation", model=_toy(), seed=1)
    elif name == "compare8":
        cfg = RunConfig(command="compare", model=_multispin())
    else:
        raise ConfigError(f"unknown preset {name!r}; available: {PRESETS}", "preset")
    return validate(cfg)


PRESETS = ("fig2ab", "fig2c", "unraveling", "correlation", "compare8")
