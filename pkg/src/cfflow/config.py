"""Run configuration: a flat ``section.key = value`` text format.

Grammar, one entry per line::

    # comment
    schedule.t_f = 0.1
    schedule.coarse_loss_type = nll
    train.hidden = 64, 64
    schedule.fine_dt_scale = auto

Blank lines and ``#`` comments are ignored; values are bare (quotes are
optional for strings). Unknown keys, type mismatches and constraint
violations raise :class:`ConfigError` naming the key and line.
"""

from __future__ import annotations

import dataclasses
import types
import typing
from dataclasses import dataclass, field
from typing import Optional

from .coarse2fine import PhaseSchedule, TrainConfig
from .tasks import TaskSpec

SWEEP_GRIDS = ("sigma2", "gamma", "lambda", "loss_type")


class ConfigError(ValueError):
    def __init__(self, message: str, key: str | None = None, line: int | None = None):
        where = "".join([f" [key {key}]" if key else "", f" [line {line}]" if line else ""])
        super().__init__(message + where)
        self.key = key
        self.line = line


@dataclass(frozen=True)
class EvalConfig:
    n_samples: int = 1000
    coverage_radius: float = 0.5
    fm_steps: int = 10
    mmd_bandwidth: Optional[float] = None

    def __post_init__(self):
        if self.n_samples < 2:
            raise ValueError(f"n_samples must be >= 2, got {self.n_samples}")
        if self.coverage_radius <= 0:
            raise ValueError(f"coverage_radius must be > 0, got {self.coverage_radius}")
        if self.fm_steps < 1:
            raise ValueError(f"fm_steps must be >= 1, got {self.fm_steps}")


@dataclass(frozen=True)
class BenchConfig:
    fm_steps: tuple[int, ...] = (1, 2, 10)
    repetitions: int = 1000
    warmup: int = 20

    def __post_init__(self):
        if self.repetitions < 30:
            raise ValueError(f"repetitions must be >= 30, got {self.repetitions}")


@dataclass(frozen=True)
class AblateConfig:
    seeds: tuple[int, ...] = (0,)


@dataclass(frozen=True)
class SweepConfig:
    grids: tuple[str, ...] = SWEEP_GRIDS
    workers: int = 1

    def __post_init__(self):
        unknown = set(self.grids) - set(SWEEP_GRIDS)
        if unknown:
            raise ValueError(f"unknown sweep grids {sorted(unknown)}; choose from {SWEEP_GRIDS}")
        if self.workers < 1:
            raise ValueError("workers must be >= 1")


@dataclass(frozen=True)
class RunConfig:
    task: TaskSpec = field(default_factory=TaskSpec)
    schedule: PhaseSchedule = field(default_factory=PhaseSchedule)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    bench: BenchConfig = field(default_factory=BenchConfig)
    ablate: AblateConfig = field(default_factory=AblateConfig)
    sweep: SweepConfig = field(default_factory=SweepConfig)
    out: str = "runs"

    @property
    def seed(self) -> int:
        return self.train.seed

    def with_overrides(self, **sections) -> "RunConfig":
        """``cfg.with_overrides(schedule={"t_f": 0.2}, out="x")``."""
        updates = {}
        for name, value in sections.items():
            if isinstance(value, dict):
                updates[name] = dataclasses.replace(getattr(self, name), **value)
            else:
                updates[name] = value
        return dataclasses.replace(self, **updates)


_SECTIONS = [f.name for f in dataclasses.fields(RunConfig) if f.name != "out"]


def _hints(cls) -> dict:
    return typing.get_type_hints(cls)


def _parse_scalar(text: str, typ, key: str, line: int):
    origin = typing.get_origin(typ)
    if origin in (typing.Union, types.UnionType):
        args = [a for a in typing.get_args(typ) if a is not type(None)]
        if text in ("auto", "none", "None"):
            return None
        return _parse_scalar(text, args[0], key, line)
    if origin is tuple:
        elem = typing.get_args(typ)[0]
        parts = [p.strip() for p in text.split(",") if p.strip()]
        return tuple(_parse_scalar(p, elem, key, line) for p in parts)
    if len(text) >= 2 and text[0] == text[-1] and text[0] in "\"'":
        text = text[1:-1]
    try:
        if typ is bool:
            lowered = text.lower()
            if lowered not in ("true", "false"):
                raise ValueError
            return lowered == "true"
        if typ is int:
            return int(text)
        if typ is float:
            return float(text)
        if typ is str:
            return text
    except ValueError:
        raise ConfigError(f"cannot parse {text!r} as {typ.__name__}", key, line) from None
    raise ConfigError(f"unsupported field type {typ!r}", key, line)


def _format_scalar(value) -> str:
    if value is None:
        return "auto"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ", ".join(_format_scalar(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def parse_config(text: str) -> RunConfig:
    values: dict[str, dict] = {name: {} for name in _SECTIONS}
    lines: dict[str, int] = {}
    out = None
    hints = {name: _hints(type(getattr(RunConfig(), name))) for name in _SECTIONS}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        stripped = raw.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"expected 'key = value', got {raw.strip()!r}", None, lineno)
        key, value = (part.strip() for part in stripped.split("=", 1))
        if key in lines:
            raise ConfigError("duplicate key", key, lineno)
        lines[key] = lineno
        if key == "out":
            out = value
            continue
        section, _, name = key.partition(".")
        if section not in values or name not in hints[section]:
            raise ConfigError("unknown key", key, lineno)
        values[section][name] = _parse_scalar(value, hints[section][name], key, lineno)

    built = {}
    defaults = RunConfig()
    for section in _SECTIONS:
        try:
            built[section] = dataclasses.replace(getattr(defaults, section), **values[section])
        except (ValueError, TypeError) as exc:
            named = [k for k in values[section] if k in str(exc)]
            key = f"{section}.{named[0]}" if named else None
            raise ConfigError(f"constraint violation: {exc}", key, lines.get(key)) from None
    if out is not None:
        built["out"] = out
    return RunConfig(**built)


def serialize_config(cfg: RunConfig) -> str:
    out = []
    for section in _SECTIONS:
        obj = getattr(cfg, section)
        for f in dataclasses.fields(obj):
            out.append(f"{section}.{f.name} = {_format_scalar(getattr(obj, f.name))}")
    out.append(f"out = {cfg.out}")
    return "\n".join(out) + "\n"


def apply_overrides(cfg: RunConfig, overrides: list[str]) -> RunConfig:
    """Apply ``key=value`` strings on top of ``cfg`` (same validation as a config file)."""
    if not overrides:
        return cfg
    text = serialize_config(cfg)
    base = {line.split("=", 1)[0].strip(): line for line in text.splitlines()}
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override must look like key=value, got {item!r}")
        key = item.split("=", 1)[0].strip()
        if key not in base:
            raise ConfigError("unknown key", key)
        base[key] = item
    return parse_config("\n".join(base.values()))


def load_config(path) -> RunConfig:
    with open(path, encoding="utf-8") as fh:
        return parse_config(fh.read())
