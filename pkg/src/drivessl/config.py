"""Flat ``key = value`` configuration files.

One assignment per line, ``#`` starts a comment. Keys are dotted
(``section.field``) and map onto dataclass fields; values are coerced using
the field's annotation. Tuples are comma separated, nested int tuples use
``x`` as the inner separator (``1x2x2, 2x2x2``).
"""
from __future__ import annotations

import dataclasses
import types
import typing
from pathlib import Path

from .errors import ConfigError


def parse_kv(text: str, source: str = "<string>") -> dict[str, str]:
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ConfigError(f"{source}:{lineno}: empty key")
        if key in out:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        out[key] = value
    return out


def read_kv(path) -> dict[str, str]:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_kv(text, str(path))


def _coerce(value: str, tp, key: str):
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if origin is typing.Union or origin is types.UnionType:
        if value.lower() in ("none", ""):
            return None
        inner = [a for a in args if a is not type(None)]
        return _coerce(value, inner[0], key)
    if origin is tuple:
        items = [v.strip() for v in value.split(",") if v.strip()]
        if len(args) == 2 and args[1] is Ellipsis:
            elem = args[0]
            if typing.get_origin(elem) is tuple:
                return tuple(tuple(int(x) for x in item.split("x")) for item in items)
            return tuple(_coerce(item, elem, key) for item in items)
        return tuple(_coerce(item, a, key) for item, a in zip(items, args))
    try:
        if tp is bool:
            low = value.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(value)
        if tp is int:
            return int(value)
        if tp is float:
            return float(value)
        if tp is str:
            return value
    except ValueError as exc:
        raise ConfigError(f"{key}: cannot parse {value!r} as {tp.__name__}") from exc
    raise ConfigError(f"{key}: unsupported field type {tp!r}")


def apply_kv(obj, mapping: dict[str, str], prefix: str):
    """Return a copy of dataclass ``obj`` with ``prefix.field`` keys applied."""
    hints = typing.get_type_hints(type(obj))
    names = {f.name for f in dataclasses.fields(obj)}
    changes = {}
    for key, value in mapping.items():
        if not key.startswith(prefix + "."):
            continue
        name = key[len(prefix) + 1:]
        if name not in names:
            raise ConfigError(f"unknown config key {key!r}")
        changes[name] = _coerce(value, hints[name], key)
    return dataclasses.replace(obj, **changes) if changes else obj


def format_value(value) -> str:
    if isinstance(value, tuple):
        return ", ".join("x".join(str(i) for i in v) if isinstance(v, tuple) else format_value(v)
                         for v in value)
    if value is None:
        return "none"
    return str(value).lower() if isinstance(value, bool) else str(value)


def dump_kv(obj, prefix: str) -> list[str]:
    return [f"{prefix}.{f.name} = {format_value(getattr(obj, f.name))}"
            for f in dataclasses.fields(obj)]
