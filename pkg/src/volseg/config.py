"""Flat ``key=value`` serialization of (nested) config dataclasses.

Nested dataclass fields flatten with a dotted prefix, e.g. ``loss.kind``.
Values parse back according to the type of the field's default value.
"""
from __future__ import annotations

from dataclasses import fields, is_dataclass
from pathlib import Path
from typing import Dict, Iterable, Set

import numpy as np

from .errors import ParseError


def format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        if value != 0 and (abs(value) < 1e-3 or abs(value) >= 1e7):
            return np.format_float_scientific(value, unique=True, trim="-", exp_digits=1)
        return repr(value)
    if isinstance(value, (tuple, list)):
        return ",".join(format_value(v) for v in value)
    return str(value)


def parse_value(text: str, like, key: str = "?", source: str = "<config>"):
    """Parse ``text`` to the type of ``like`` (the field's default)."""
    text = text.strip()
    try:
        if isinstance(like, bool):
            lowered = text.lower()
            if lowered in ("true", "1", "yes"):
                return True
            if lowered in ("false", "0", "no"):
                return False
            raise ValueError(f"not a boolean: {text!r}")
        if isinstance(like, int):
            return int(text)
        if isinstance(like, float):
            return float(text)
        if isinstance(like, tuple):
            if not text:
                return ()
            elem = like[0] if like else 0.0
            return tuple(parse_value(t, elem, key, source) for t in text.split(","))
        return text
    except ValueError as exc:
        raise ParseError(source, key, str(exc)) from None


def to_flat(obj, prefix: str = "") -> Dict[str, str]:
    out: Dict[str, str] = {}
    for f in fields(obj):
        value = getattr(obj, f.name)
        key = prefix + f.name
        if is_dataclass(value):
            out.update(to_flat(value, key + "."))
        else:
            out[key] = format_value(value)
    return out


def known_keys(cls, prefix: str = "") -> Set[str]:
    default = cls()
    keys = set()
    for f in fields(cls):
        value = getattr(default, f.name)
        if is_dataclass(value):
            keys |= known_keys(type(value), prefix + f.name + ".")
        else:
            keys.add(prefix + f.name)
    return keys


def from_flat(cls, flat: Dict[str, str], prefix: str = "", source: str = "<config>"):
    """Build ``cls`` from the keys under ``prefix``; absent keys keep defaults."""
    default = cls()
    kwargs = {}
    for f in fields(cls):
        value = getattr(default, f.name)
        key = prefix + f.name
        if is_dataclass(value):
            kwargs[f.name] = from_flat(type(value), flat, key + ".", source)
        elif key in flat:
            kwargs[f.name] = parse_value(flat[key], value, key, source)
    try:
        return cls(**kwargs)
    except ValueError as exc:
        raise ParseError(source, prefix.rstrip(".") or cls.__name__, str(exc)) from None


def parse_lines(lines: Iterable[str], source: str = "<config>") -> Dict[str, str]:
    flat: Dict[str, str] = {}
    for lineno, raw in enumerate(lines, start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep or not key.strip():
            raise ParseError(source, f"line {lineno}", f"expected key=value, got {raw.strip()!r}")
        flat[key.strip()] = value.strip()
    return flat


def read_flat(path) -> Dict[str, str]:
    return parse_lines(Path(path).read_text().splitlines(), str(path))


def write_flat(flat: Dict[str, str], path) -> None:
    Path(path).write_text("".join(f"{k}={v}\n" for k, v in flat.items()))
