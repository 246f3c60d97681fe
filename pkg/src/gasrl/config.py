"""Flat ``key = value`` run configuration with dotted keys.

Example::

    # comment
    data.source = "synthetic"
    synthetic.regime = "ou"
    env.tc = 0.1
    train.hidden = [64, 64]
    seed = 7

Values are parsed as JSON when possible and kept as bare strings otherwise.
A nested ``*.seed`` that is not set explicitly inherits the global ``seed``.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import types
import typing
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any

from .backtest import WalkForwardSpec
from .dqn import TrainConfig
from .ensemble import EnsembleConfig
from .env import EnvConfig
from .explain import AttributionConfig
from .features import FeatureSpec
from .market_data import SyntheticSpec


class ConfigError(ValueError):
    """Invalid configuration; ``key`` names the offending entry."""

    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key


@dataclass(frozen=True)
class DataConfig:
    source: str = "synthetic"  # "synthetic" or a candle CSV path
    fundamentals: tuple[str, ...] = ()
    synthetic_fundamentals: tuple[str, ...] = ()
    pnl_scale: float = 1.0


@dataclass(frozen=True)
class EnvSection:
    tc: float = 0.1
    episode_length: int = 252


@dataclass(frozen=True)
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    synthetic: SyntheticSpec = field(default_factory=SyntheticSpec)
    features: FeatureSpec = field(default_factory=FeatureSpec)
    env: EnvSection = field(default_factory=EnvSection)
    train: TrainConfig = field(default_factory=TrainConfig)
    walkforward: WalkForwardSpec = field(default_factory=WalkForwardSpec)
    ensemble: EnsembleConfig = field(default_factory=EnsembleConfig)
    explain: AttributionConfig = field(default_factory=AttributionConfig)
    output_dir: str = "out"
    seed: int = 0

    @property
    def env_config(self) -> EnvConfig:
        return EnvConfig(self.env.tc, self.env.episode_length, self.features)

    def to_flat(self) -> dict[str, Any]:
        flat: dict[str, Any] = {}
        for f in fields(self):
            value = getattr(self, f.name)
            if dataclasses.is_dataclass(value):
                for sub in fields(value):
                    flat[f"{f.name}.{sub.name}"] = _jsonable(getattr(value, sub.name))
            else:
                flat[f.name] = _jsonable(value)
        return flat

    def dumps(self) -> str:
        return "".join(f"{k} = {json.dumps(v)}\n" for k, v in sorted(self.to_flat().items()))

    def digest(self) -> str:
        """sha256 of the canonical flat form; identical configs hash identically."""
        return hashlib.sha256(json.dumps(self.to_flat(), sort_keys=True).encode()).hexdigest()


SECTIONS = {f.name: f for f in fields(RunConfig)}


def _jsonable(value):
    return list(value) if isinstance(value, tuple) else value


def parse_value(text: str):
    text = text.strip()
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def parse_lines(text: str, origin: str = "<config>") -> dict[str, Any]:
    out: dict[str, Any] = {}
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        key = key.strip()
        if not sep or not key:
            raise ConfigError(f"{origin}:{n}", f"expected 'key = value', got {raw!r}")
        out[key] = parse_value(value)
    return out


def _coerce(key: str, value, annotation):
    hint = annotation
    origin = typing.get_origin(hint)
    args = typing.get_args(hint)
    if origin in (typing.Union, types.UnionType):
        if value is None and type(None) in args:
            return None
        hint = next(a for a in args if a is not type(None))
        origin, args = typing.get_origin(hint), typing.get_args(hint)
    if origin is tuple:
        if not isinstance(value, list):
            raise ConfigError(key, f"expected a list, got {value!r}")
        inner = args[0] if args else Any
        return tuple(_coerce(key, v, inner) for v in value)
    if hint is bool:
        if not isinstance(value, bool):
            raise ConfigError(key, f"expected true/false, got {value!r}")
        return value
    if hint is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(key, f"expected an integer, got {value!r}")
        return value
    if hint is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(key, f"expected a number, got {value!r}")
        return float(value)
    if hint is str:
        if not isinstance(value, str):
            raise ConfigError(key, f"expected a string, got {value!r}")
        return value
    return value


def build_config(values: dict[str, Any]) -> RunConfig:
    """Validate flat ``values`` against the schema and build a :class:`RunConfig`."""
    per_section: dict[str, dict[str, Any]] = {}
    top: dict[str, Any] = {}
    for key, value in values.items():
        section, dot, name = key.partition(".")
        if section not in SECTIONS:
            raise ConfigError(key, "unknown key")
        cls = SECTIONS[section].default_factory if SECTIONS[section].default_factory is not dataclasses.MISSING else None
        if not dot:
            if cls is not None:
                raise ConfigError(key, "is a section; set one of its fields")
            top[section] = value
            continue
        if cls is None:
            raise ConfigError(key, "unknown key")
        hints = typing.get_type_hints(cls)
        if name not in hints:
            raise ConfigError(key, "unknown key")
        per_section.setdefault(section, {})[name] = _coerce(key, value, hints[name])
    hints = typing.get_type_hints(RunConfig)
    kwargs = {k: _coerce(k, v, hints[k]) for k, v in top.items()}
    seed = kwargs.get("seed", 0)
    for section, f in SECTIONS.items():
        if f.default_factory is dataclasses.MISSING:
            continue
        params = per_section.get(section, {})
        if "seed" in typing.get_type_hints(f.default_factory) and "seed" not in params:
            params["seed"] = seed
        try:
            kwargs[section] = f.default_factory(**params)
        except (TypeError, ValueError) as exc:
            raise ConfigError(section, str(exc)) from None
    return RunConfig(**kwargs)


def load_config(path: str | Path | None = None, overrides: dict[str, Any] | None = None) -> RunConfig:
    values: dict[str, Any] = {}
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigError("config", f"file not found: {path}")
        values.update(parse_lines(path.read_text(), str(path)))
    values.update(overrides or {})
    return build_config(values)


def parse_overrides(items: list[str]) -> dict[str, Any]:
    """``["a.b=1", ...]`` from repeated ``--set`` flags."""
    out = {}
    for item in items:
        key, sep, value = item.partition("=")
        if not sep or not key.strip():
            raise ConfigError(item, "override must look like key=value")
        out[key.strip()] = parse_value(value)
    return out
