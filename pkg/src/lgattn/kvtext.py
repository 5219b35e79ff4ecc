"""Flat ``key=value`` text used by config files and checkpoint headers."""

from __future__ import annotations

import dataclasses
import typing

from lgattn.errors import ConfigError

NONE_TEXT = "none"


def format_value(value) -> str:
    if value is None:
        return NONE_TEXT
    if isinstance(value, bool):
        return "true" if value else "false"
    return str(value)


def to_text(values: dict) -> str:
    """Canonical form: one ``key=value`` line per key, sorted."""
    return "".join(f"{k}={format_value(values[k])}\n" for k in sorted(values))


def parse_lines(text: str) -> list[tuple[str, str, int]]:
    """Split text into (key, raw value, line number); ``#`` starts a comment."""
    out = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"expected key=value, got {raw!r}", line=lineno)
        key, value = line.split("=", 1)
        out.append((key.strip(), value.strip(), lineno))
    return out


def field_types(cls) -> dict[str, type]:
    """Map dataclass field name to its base type (``int | None`` -> int)."""
    hints = typing.get_type_hints(cls)
    out = {}
    for f in dataclasses.fields(cls):
        t = hints[f.name]
        args = [a for a in typing.get_args(t) if a is not type(None)]
        out[f.name] = args[0] if args else t
    return out


def coerce(key: str, raw: str, typ: type, line: int | None = None):
    if raw.lower() == NONE_TEXT:
        return None
    try:
        if typ is bool:
            low = raw.lower()
            if low in ("true", "1", "yes"):
                return True
            if low in ("false", "0", "no"):
                return False
            raise ValueError(raw)
        if typ is int:
            return int(raw)
        if typ is float:
            return float(raw)
    except ValueError:
        raise ConfigError(f"cannot read {raw!r} as {typ.__name__}", key=key, line=line) from None
    return raw


def from_text(cls, text: str, strict: bool = True):
    """Build dataclass ``cls`` from key=value text; unknown keys are errors when ``strict``."""
    types = field_types(cls)
    values = {}
    for key, raw, line in parse_lines(text):
        if key not in types:
            if strict:
                raise ConfigError("unknown key", key=key, line=line)
            continue
        values[key] = coerce(key, raw, types[key], line)
    return cls(**values)
