"""Flat ``key=value`` config files.

UTF-8 text, one assignment per line, ``#`` starts a comment. Keys must be
fields of the target dataclass; unknown or repeated keys are errors so that an
encoder and a decoder cannot silently drift apart.
"""

from __future__ import annotations

from dataclasses import fields
from typing import get_origin


class ConfigError(ValueError):
    pass


def _bool(s: str) -> bool:
    low = s.lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(s)


def _int_tuple(s: str) -> tuple[int, ...]:
    return tuple(int(p) for p in s.split(",") if p.strip())


_CONVERT = {"int": int, "float": float, "str": str, "bool": _bool, "tuple[int, ...]": _int_tuple}


def parse_kv(text: str) -> dict[str, tuple[int, str]]:
    """``key -> (line number, raw value)``."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value")
        key, val = (p.strip() for p in line.split("=", 1))
        if key in out:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        out[key] = (lineno, val)
    return out


def _kind(tp) -> str:
    """Field annotation as text, whether or not annotations are postponed."""
    if isinstance(tp, str):
        return tp
    if get_origin(tp) is None and isinstance(tp, type):
        return tp.__name__
    return str(tp)


def load(cls, text: str, **overrides):
    kinds = {f.name: _kind(f.type) for f in fields(cls)}
    values = {}
    for key, (lineno, val) in parse_kv(text).items():
        if key not in kinds:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        try:
            values[key] = _CONVERT[kinds[key]](val)
        except ValueError as e:
            raise ConfigError(f"line {lineno}: bad value for {key}: {val!r}") from e
    values.update(overrides)
    try:
        return cls(**values)
    except ValueError as e:
        raise ConfigError(str(e)) from e


def dump(obj) -> str:
    def fmt(v):
        if isinstance(v, float):
            return repr(v)
        if isinstance(v, tuple):
            return ",".join(str(p) for p in v)
        return str(v).lower() if isinstance(v, bool) else str(v)

    return "".join(f"{f.name}={fmt(getattr(obj, f.name))}\n" for f in fields(obj))
