"""Plain-text ``key = value`` configuration files.

Blank lines and ``#`` comments are ignored. Keys may be prefixed with a
section (``network.lstm_hidden = 32``); unprefixed keys go to every
dataclass that has a field of that name.
"""

from __future__ import annotations

import dataclasses
import types
import typing
from pathlib import Path


class ConfigError(ValueError):
    pass


def read_config(path) -> dict[str, str]:
    values = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key=value")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ConfigError(f"{path}:{lineno}: empty key")
        values[key] = value
    return values


def _coerce(raw: str, annotation):
    origin = typing.get_origin(annotation)
    if origin in (typing.Union, types.UnionType):
        args = [a for a in typing.get_args(annotation) if a is not type(None)]
        if raw.lower() in ("none", "null", ""):
            return None
        annotation = args[0]
        origin = typing.get_origin(annotation)
    if annotation is bool:
        if raw.lower() in ("1", "true", "yes", "on"):
            return True
        if raw.lower() in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"not a boolean: {raw!r}")
    if origin is tuple:
        inner = typing.get_args(annotation)
        parts = [p.strip() for p in raw.strip("()").split(",") if p.strip()]
        return tuple(_coerce(p, inner[0]) for p in parts)
    if annotation in (int, float, str):
        try:
            return annotation(float(raw)) if annotation is int and "e" in raw.lower() else annotation(raw)
        except ValueError as exc:
            raise ConfigError(f"cannot parse {raw!r} as {annotation.__name__}") from exc
    return raw


def apply_config(obj, values: dict[str, str], section: str | None = None):
    """Return a copy of dataclass ``obj`` with matching keys from ``values`` applied."""
    hints = typing.get_type_hints(type(obj))
    hints = {f.name: hints[f.name] for f in dataclasses.fields(obj)}
    changes = {}
    for key, raw in values.items():
        sec, _, name = key.rpartition(".")
        if sec and sec != section:
            continue
        if name in hints:
            changes[name] = _coerce(raw, hints[name]) if isinstance(raw, str) else raw
    return dataclasses.replace(obj, **changes)
