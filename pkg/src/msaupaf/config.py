"""Plain-text ``key = value`` configuration files."""

from __future__ import annotations

import dataclasses
import typing
from pathlib import Path
from typing import Any


def parse_kv(text: str) -> dict[str, str]:
    out: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ValueError(f"line {lineno}: empty key")
        out[key] = value
    return out


def read_kv(path: str | Path) -> dict[str, str]:
    return parse_kv(Path(path).read_text())


def _coerce(raw: str, tp: Any) -> Any:
    origin = typing.get_origin(tp)
    if tp is bool:
        low = raw.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    if tp is int:
        return int(raw)
    if tp is float:
        return float(raw)
    if tp is str:
        return raw
    if origin is tuple:
        args = typing.get_args(tp)
        parts = [p.strip() for p in raw.strip("()[] ").split(",") if p.strip()]
        if len(args) == 2 and args[1] is Ellipsis:
            return tuple(_coerce(p, args[0]) for p in parts)
        if len(parts) != len(args):
            raise ValueError(f"expected {len(args)} values, got {raw!r}")
        return tuple(_coerce(p, a) for p, a in zip(parts, args))
    raise TypeError(f"unsupported config field type {tp!r}")


def apply_kv(obj, values: dict[str, str], strict: bool = False):
    """Return a copy of dataclass ``obj`` with matching keys overridden.

    Unknown keys are ignored unless ``strict``.
    """
    hints = typing.get_type_hints(type(obj))
    names = {f.name for f in dataclasses.fields(obj) if f.init}
    updates = {}
    for key, raw in values.items():
        if key not in names:
            if strict:
                raise KeyError(f"unknown config key {key!r}")
            continue
        updates[key] = _coerce(raw, hints[key])
    return dataclasses.replace(obj, **updates)


def dump_kv(*objs) -> str:
    lines = []
    for obj in objs:
        for f in dataclasses.fields(obj):
            if not f.init:
                continue
            v = getattr(obj, f.name)
            if isinstance(v, tuple):
                v = ", ".join(str(x) for x in v)
            lines.append(f"{f.name} = {v}")
    return "\n".join(lines) + "\n"
