"""Flat ``section.key = value`` experiment configuration.

Every key has a typed default except ``train.output_dir``.  ``#`` starts a
comment.  Unknown keys, malformed values and duplicate keys are errors that
cite the offending line(s).
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

from .denoiser import ModelConfig
from .edm import EdmConfig
from .flow import FlowSolverConfig
from .losses import DEFAULT_SCALE_S, WeightStrategy, make_strategy


class ConfigError(ValueError):
    """Invalid configuration file or value."""


@dataclass(frozen=True)
class SampleConfig:
    """Evaluation-time sampler: Euler steps over a power-law schedule."""

    n_steps: int = 12
    sigma_min: float = 0.002
    sigma_max: float = 80.0
    rho: float = 7.0


@dataclass(frozen=True)
class LossConfig:
    strategy: str = "baseline"
    psi: float | None = None
    scale_s: float = DEFAULT_SCALE_S

    def build(self) -> WeightStrategy:
        return make_strategy(self.strategy, self.psi)


@dataclass(frozen=True)
class DataConfig:
    n_train: int = 256
    n_val: int = 32
    n_test: int = 64
    seed: int = 0


@dataclass(frozen=True)
class OptimConfig:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8


@dataclass(frozen=True)
class RunConfig:
    output_dir: str = ""
    batch_size: int = 8
    total_steps: int = 2000
    val_every: int = 100
    seed: int = 0


@dataclass(frozen=True)
class LogConfig:
    # Wall-clock timings make logs differ between otherwise identical runs,
    # so they are opt-in.
    wall_ms: bool = False


@dataclass(frozen=True)
class TrainConfig:
    edm: EdmConfig = field(default_factory=EdmConfig)
    sample: SampleConfig = field(default_factory=SampleConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    flow: FlowSolverConfig = field(default_factory=FlowSolverConfig)
    data: DataConfig = field(default_factory=DataConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    train: RunConfig = field(default_factory=RunConfig)
    log: LogConfig = field(default_factory=LogConfig)

    @property
    def output_dir(self) -> Path:
        return Path(self.train.output_dir)

    def strategy(self) -> WeightStrategy:
        return self.loss.build()


REQUIRED = ("train.output_dir",)
_SCALARS = {"int": int, "float": float, "str": str, "bool": bool, "float | None": float}


def _schema() -> dict[str, tuple[str, str, type]]:
    keys = {}
    for section in dataclasses.fields(TrainConfig):
        for f in dataclasses.fields(section.default_factory):
            keys[f"{section.name}.{f.name}"] = (section.name, f.name, _SCALARS[f.type])
    return keys


SCHEMA = _schema()


def _convert(raw: str, kind: type, key: str) -> Any:
    if kind is bool:
        low = raw.lower()
        if low in ("true", "1", "yes"):
            return True
        if low in ("false", "0", "no"):
            return False
        raise ValueError(f"{key} expects a boolean (true/false), got {raw!r}")
    if kind is int:
        try:
            return int(raw)
        except ValueError:
            raise ValueError(f"{key} expects an integer, got {raw!r}") from None
    if kind is float:
        try:
            return float(raw)
        except ValueError:
            raise ValueError(f"{key} expects a number, got {raw!r}") from None
    return raw


def build_config(values: Mapping[str, Any], base: TrainConfig | None = None) -> TrainConfig:
    """Apply ``{"section.key": value}`` overrides to ``base`` (defaults if omitted) and validate."""
    cfg = base or TrainConfig()
    grouped: dict[str, dict[str, Any]] = {}
    for key, value in values.items():
        if key not in SCHEMA:
            raise ConfigError(f"unknown key {key!r}")
        section, name, kind = SCHEMA[key]
        if isinstance(value, str) and kind is not str:
            value = _convert(value, kind, key)
        grouped.setdefault(section, {})[name] = value
    try:
        sections = {s: dataclasses.replace(getattr(cfg, s), **kv) for s, kv in grouped.items()}
        cfg = dataclasses.replace(cfg, **sections)
        _validate(cfg)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
    return cfg


def _validate(cfg: TrainConfig) -> None:
    cfg.strategy()
    if cfg.loss.psi is not None and not cfg.loss.psi > 0:
        raise ValueError(f"loss.psi must be positive, got {cfg.loss.psi}")
    if not cfg.loss.scale_s > 0:
        raise ValueError(f"loss.scale_s must be positive, got {cfg.loss.scale_s}")
    if not 0 < cfg.sample.sigma_min < cfg.sample.sigma_max:
        raise ValueError("need 0 < sample.sigma_min < sample.sigma_max")
    if cfg.sample.n_steps < 2:
        raise ValueError(f"sample.n_steps must be >= 2, got {cfg.sample.n_steps}")
    for key in ("n_train", "n_val", "n_test"):
        if getattr(cfg.data, key) < 1:
            raise ValueError(f"data.{key} must be >= 1")
    for key in ("batch_size", "total_steps", "val_every"):
        if getattr(cfg.train, key) < 1:
            raise ValueError(f"train.{key} must be >= 1")
    if not cfg.optim.learning_rate > 0:
        raise ValueError(f"optim.learning_rate must be positive, got {cfg.optim.learning_rate}")
    if not (0 <= cfg.optim.beta1 < 1 and 0 <= cfg.optim.beta2 < 1 and cfg.optim.epsilon > 0):
        raise ValueError("optim betas must lie in [0, 1) and epsilon must be positive")


def parse_config_text(text: str, source: str = "<config>") -> TrainConfig:
    values: dict[str, Any] = {}
    seen: dict[str, int] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        where = f"{source}:{lineno}"
        if "=" not in body:
            raise ConfigError(f"{where}: expected 'key = value', got {body!r}")
        key, raw = (part.strip() for part in body.split("=", 1))
        if key in seen:
            raise ConfigError(f"{where}: duplicate key {key!r} (first set on line {seen[key]})")
        if key not in SCHEMA:
            raise ConfigError(f"{where}: unknown key {key!r}")
        if not raw:
            raise ConfigError(f"{where}: key {key!r} has no value")
        seen[key] = lineno
        try:
            values[key] = _convert(raw, SCHEMA[key][2], key)
        except ValueError as exc:
            raise ConfigError(f"{where}: {exc}") from None
    for key in REQUIRED:
        if key not in values:
            raise ConfigError(f"{source}: missing required key {key!r}")
    if values.get("loss.strategy") == "gated" and "loss.psi" not in values:
        raise ConfigError(f"{source}:{seen['loss.strategy']}: loss.strategy = gated requires key 'loss.psi'")
    try:
        return build_config(values)
    except ConfigError as exc:
        raise ConfigError(f"{source}: {exc}") from None


def parse_config(path: str | Path) -> TrainConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file {str(path)!r} does not exist")
    return parse_config_text(path.read_text(), source=str(path))


def format_config(cfg: TrainConfig) -> str:
    """Fully resolved config in the file syntax (round-trips through :func:`parse_config_text`)."""
    lines = []
    for key, (section, name, _) in SCHEMA.items():
        value = getattr(getattr(cfg, section), name)
        if value is None:
            continue
        lines.append(f"{key} = {str(value).lower() if isinstance(value, bool) else value}")
    return "\n".join(lines) + "\n"
