"""Dataclass <-> JSON config plumbing with strict unknown-key rejection."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from typing import get_args, get_origin

from .errors import InvalidArgument


def from_dict(cls, data: dict, path: str = ""):
    """Build a (possibly nested) dataclass from a plain dict.

    Unknown keys raise InvalidArgument naming the offending key, so config
    typos never pass silently.
    """
    if not dataclasses.is_dataclass(cls):
        raise InvalidArgument(f"{cls!r} is not a config dataclass")
    if not isinstance(data, dict):
        raise InvalidArgument(f"config section {path or '<root>'} must be an object")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(data) - set(fields)
    if unknown:
        key = sorted(unknown)[0]
        where = f"{path}.{key}" if path else key
        raise InvalidArgument(f"unknown config key {where!r}")
    kwargs = {}
    for name, value in data.items():
        f = fields[name]
        sub = f"{path}.{name}" if path else name
        kwargs[name] = _coerce(f.type, value, sub)
    return cls(**kwargs)


def _coerce(ftype, value, path: str):
    if isinstance(ftype, str):
        # postponed annotations: fall back on structural handling
        if value is None:
            return None
        if isinstance(value, dict):
            raise InvalidArgument(f"cannot coerce nested object at {path!r}")
        return tuple(value) if isinstance(value, list) else value
    origin = get_origin(ftype)
    if dataclasses.is_dataclass(ftype) and isinstance(value, dict):
        return from_dict(ftype, value, path)
    if origin is tuple and isinstance(value, list):
        return tuple(value)
    if origin is not None:  # Optional[...] and friends
        for arg in get_args(ftype):
            if dataclasses.is_dataclass(arg) and isinstance(value, dict):
                return from_dict(arg, value, path)
        if isinstance(value, list):
            return tuple(value)
    return value


def to_dict(obj) -> dict:
    return _plain(dataclasses.asdict(obj))


def _plain(x):
    if isinstance(x, dict):
        return {k: _plain(v) for k, v in x.items()}
    if isinstance(x, tuple):
        return [_plain(v) for v in x]
    if isinstance(x, list):
        return [_plain(v) for v in x]
    return x


def apply_overrides(data: dict, overrides: list[str]) -> dict:
    """Apply --key=value pairs with dotted paths onto a config dict."""
    out = json.loads(json.dumps(data))
    for item in overrides:
        if "=" not in item:
            raise InvalidArgument(f"override {item!r} is not key=value")
        key, raw = item.split("=", 1)
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = out
        parts = key.split(".")
        for part in parts[:-1]:
            if part not in node or not isinstance(node[part], dict):
                node[part] = node.get(part) if isinstance(node.get(part), dict) else {}
            node = node[part]
        node[parts[-1]] = value
    return out


def config_hash(data: dict) -> str:
    return hashlib.sha256(
        json.dumps(data, sort_keys=True).encode()
    ).hexdigest()[:10]


def describe_defaults(cls, prefix: str = "") -> list[str]:
    """One line per config key with its default, for --help output."""
    lines = []
    for f in dataclasses.fields(cls):
        name = f"{prefix}{f.name}"
        if dataclasses.is_dataclass(f.type):
            lines.extend(describe_defaults(f.type, prefix=f"{name}."))
            continue
        if f.default is not dataclasses.MISSING:
            default = f.default
        elif f.default_factory is not dataclasses.MISSING:  # type: ignore[misc]
            made = f.default_factory()  # type: ignore[misc]
            if dataclasses.is_dataclass(made):
                lines.extend(describe_defaults(type(made), prefix=f"{name}."))
                continue
            default = made
        else:
            default = "<required>"
        lines.append(f"  {name} = {default!r}")
    return lines
