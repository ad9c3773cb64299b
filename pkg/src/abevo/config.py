"""Flat ``key = value`` config files mapped onto dataclasses."""

from __future__ import annotations

import dataclasses
import os
import types
import typing
from pathlib import Path
from typing import Any, Mapping, Optional, TypeVar

T = TypeVar("T")


def read_kv(path: str | os.PathLike) -> dict[str, str]:
    """Read ``key = value`` lines; ``#`` starts a comment, blank lines are skipped."""
    out: dict[str, str] = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected 'key = value'")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def _strip_optional(tp: Any) -> Any:
    origin = typing.get_origin(tp)
    if origin in (typing.Union, types.UnionType):
        args = [a for a in typing.get_args(tp) if a is not type(None)]
        if len(args) == 1:
            return args[0]
    return tp


def coerce(value: Any, tp: Any) -> Any:
    if not isinstance(value, str):
        return value
    tp = _strip_optional(tp)
    if value.lower() in ("none", "null", "") and tp is not str:
        return None
    origin = typing.get_origin(tp)
    if tp is bool:
        if value.lower() in ("1", "true", "yes", "on"):
            return True
        if value.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {value!r}")
    if tp in (int, float, str):
        return tp(value)
    if origin is tuple:
        args = typing.get_args(tp)
        parts = [p.strip() for p in value.split(",") if p.strip()]
        if len(args) == 2 and args[1] is Ellipsis:
            return tuple(coerce(p, args[0]) for p in parts)
        if len(parts) != len(args):
            raise ValueError(f"expected {len(args)} comma-separated values, got {value!r}")
        return tuple(coerce(p, a) for p, a in zip(parts, args))
    return value


def from_mapping(cls: type[T], values: Mapping[str, Any], *, strict: bool = True) -> T:
    """Build dataclass ``cls`` from string-valued ``values``; unknown keys raise when ``strict``."""
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(values) - names
    if strict and unknown:
        raise ValueError(f"unknown config keys for {cls.__name__}: {sorted(unknown)}")
    kwargs = {k: coerce(v, hints[k]) for k, v in values.items() if k in names}
    return cls(**kwargs)


def load(cls: type[T], path: Optional[str | os.PathLike] = None, overrides: Optional[Mapping[str, Any]] = None,
         *, strict: bool = False) -> T:
    """File values first, then ``overrides`` (e.g. command-line flags) on top."""
    values: dict[str, Any] = dict(read_kv(path)) if path else {}
    for k, v in (overrides or {}).items():
        if v is not None:
            values[k] = v
    return from_mapping(cls, values, strict=strict)


def to_kv(obj: Any) -> str:
    lines = []
    for f in dataclasses.fields(obj):
        v = getattr(obj, f.name)
        if isinstance(v, tuple):
            v = ",".join(str(x) for x in v)
        lines.append(f"{f.name} = {v}")
    return "\n".join(lines) + "\n"
