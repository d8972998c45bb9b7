"""Run configuration files: INI sections [model], [train], [noise], [distill], [paths].

Every key is optional. Unknown sections or keys are rejected. Overrides use
``section.key=value`` (or a bare ``key=value`` when the key name is unique
across sections) and are applied after the file, last one wins.
"""
from __future__ import annotations

import configparser
import dataclasses
import hashlib
import types
import typing
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

from .degradation import NoiseSpec
from .errors import ConfigError
from .losses import DistillConfig
from .model import ModelConfig
from .train import TrainConfig


@dataclass
class PathsConfig:
    train_dir: str | None = None  # image directory or manifest file
    val_dir: str | None = None
    run_root: str | None = None  # falls back to $MDRN_RUN_ROOT, then ./runs


@dataclass
class NoiseSection:
    sigma: float = 25.0
    seed: int = 0  # evaluation noise seed


# section -> (dataclass, excluded fields)
SCHEMA = {
    "model": (ModelConfig, ()),
    "train": (TrainConfig, ("sigma", "distill")),
    "noise": (NoiseSection, ()),
    "distill": (DistillConfig, ("student_sigma",)),
    "paths": (PathsConfig, ()),
}


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    noise: NoiseSpec = field(default_factory=lambda: NoiseSpec(25.0))
    paths: PathsConfig = field(default_factory=PathsConfig)

    @property
    def distill(self) -> DistillConfig:
        return self.train.distill

    def dump(self) -> str:
        cp = configparser.ConfigParser(interpolation=None)
        values = {
            "model": self.model,
            "train": self.train,
            "noise": NoiseSection(self.noise.sigma, self.noise.seed),
            "distill": self.train.distill,
            "paths": self.paths,
        }
        for section, (cls, skip) in SCHEMA.items():
            cp[section] = {
                f.name: _format(getattr(values[section], f.name))
                for f in dataclasses.fields(cls)
                if f.init and f.name not in skip
            }
        lines = []
        for section in cp.sections():
            lines.append(f"[{section}]")
            lines += [f"{k} = {v}" for k, v in cp[section].items()]
            lines.append("")
        return "\n".join(lines)

    def digest(self) -> str:
        return hashlib.sha256(self.dump().encode()).hexdigest()[:10]


def _format(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, Enum):
        return str(v.value)
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (list, tuple)):
        return ",".join(_format(x) for x in v)
    return str(v)


def _coerce(raw: str, tp, where: str):
    raw = raw.strip()
    origin = typing.get_origin(tp)
    if origin in (typing.Union, types.UnionType):
        args = [a for a in typing.get_args(tp) if a is not type(None)]
        if raw.lower() in ("none", ""):
            return None
        return _coerce(raw, args[0], where)
    try:
        if origin in (list, tuple):
            (inner, *_) = typing.get_args(tp)
            items = [_coerce(x, inner, where) for x in raw.split(",") if x.strip()]
            return tuple(items) if origin is tuple else items
        if tp is bool:
            low = raw.lower()
            if low in ("true", "yes", "1", "on"):
                return True
            if low in ("false", "no", "0", "off"):
                return False
            raise ValueError(raw)
        if tp is int:
            return int(raw)
        if tp is float:
            return float(raw)
        if isinstance(tp, type) and issubclass(tp, Enum):
            return tp(raw.lower())
        return raw
    except ValueError:
        raise ConfigError(f"{where}: cannot parse {raw!r} as {tp}") from None


def _field_types(cls) -> dict:
    hints = typing.get_type_hints(cls)
    skip = dict((c, s) for c, s in SCHEMA.values())[cls]
    return {f.name: hints[f.name] for f in dataclasses.fields(cls) if f.init and f.name not in skip}


def _resolve_override(key: str) -> tuple[str, str]:
    if "." in key:
        section, name = key.split(".", 1)
        return section, name
    owners = [s for s, (cls, _) in SCHEMA.items() if key in _field_types(cls)]
    if len(owners) != 1:
        raise ConfigError(f"override key {key!r} is {'ambiguous' if owners else 'unknown'}; use section.key")
    return owners[0], key


def load_run_config(path=None, overrides=()) -> RunConfig:
    raw: dict[str, dict[str, str]] = {s: {} for s in SCHEMA}
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        cp = configparser.ConfigParser(interpolation=None)
        try:
            cp.read(path)
        except configparser.Error as e:
            raise ConfigError(f"{path}: {e}") from e
        for section in cp.sections():
            if section not in SCHEMA:
                raise ConfigError(f"{path}: unknown section [{section}]")
            raw[section].update(cp[section])
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, value = item.split("=", 1)
        section, name = _resolve_override(key.strip())
        if section not in SCHEMA:
            raise ConfigError(f"override {item!r}: unknown section {section!r}")
        raw[section][name] = value

    parsed = {}
    for section, (cls, _) in SCHEMA.items():
        types_ = _field_types(cls)
        kwargs = {}
        for k, v in raw[section].items():
            if k not in types_:
                raise ConfigError(f"unknown key {section}.{k}")
            kwargs[k] = _coerce(v, types_[k], f"{section}.{k}")
        try:
            parsed[section] = cls(**kwargs)
        except (TypeError, ValueError) as e:
            raise ConfigError(f"[{section}]: {e}") from e
    noise = parsed["noise"]
    try:
        train = dataclasses.replace(parsed["train"], sigma=noise.sigma, distill=parsed["distill"])
        spec = NoiseSpec(noise.sigma, noise.seed)
    except ValueError as e:
        raise ConfigError(str(e)) from e
    return RunConfig(parsed["model"], train, spec, parsed["paths"])
