"""Flat ``section.key = value`` configuration files.

Lines starting with ``#`` are comments. Values are kept as strings by the
parser and converted against dataclass defaults by :func:`build`.
Sequences are comma separated.
"""

from __future__ import annotations

import dataclasses
import math
from typing import Any


class ConfigError(ValueError):
    pass


def parse(text: str) -> dict:
    out = {}
    for line_no, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"line {line_no}: expected 'key = value', got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key or any(c.isspace() for c in key):
            raise ConfigError(f"line {line_no}: malformed key {key!r}")
        if key in out:
            raise ConfigError(f"line {line_no}: duplicate key {key!r}")
        out[key] = value
    return out


def serialize(cfg: dict) -> str:
    return "".join(f"{k} = {v}\n" for k, v in cfg.items())


def section(cfg: dict, name: str) -> dict:
    prefix = name + "."
    return {k[len(prefix):]: v for k, v in cfg.items() if k.startswith(prefix)}


def format_value(v: Any) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (tuple, list)):
        return ",".join(format_value(x) for x in v)
    if isinstance(v, float):
        return "inf" if math.isinf(v) else repr(v)
    return str(v)


def _convert(key, text, default):
    try:
        if isinstance(default, bool):
            if text.lower() not in ("true", "false", "1", "0"):
                raise ValueError(text)
            return text.lower() in ("true", "1")
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, tuple):
            items = [s.strip() for s in text.split(",") if s.strip()]
            elem = default[0] if default else text
            return tuple(_convert(key, s, elem) for s in items)
        return text
    except ValueError:
        raise ConfigError(f"key {key!r}: cannot parse value {text!r}") from None


def build(cls, values: dict, prefix: str = "", **overrides):
    """Instantiate dataclass ``cls`` from string values; unknown keys are errors."""
    fields = {f.name: f for f in dataclasses.fields(cls)}
    defaults = cls()
    kwargs = {}
    for key, text in values.items():
        if key not in fields:
            raise ConfigError(f"unknown config key {prefix + key!r}")
        kwargs[key] = _convert(prefix + key, text, getattr(defaults, key))
    kwargs.update(overrides)
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {prefix.rstrip('.') or cls.__name__} settings: {exc}") from None


def dump(obj, prefix: str) -> dict:
    return {f"{prefix}.{f.name}": format_value(getattr(obj, f.name))
            for f in dataclasses.fields(obj)}
