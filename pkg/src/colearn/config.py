"""Flat ``key=value`` configuration text."""

from __future__ import annotations

import dataclasses
from pathlib import Path

_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def _convert(raw: str, typ, key: str):
    typ = typ if isinstance(typ, str) else getattr(typ, "__name__", str(typ))
    typ = typ.replace(" ", "")
    optional = "None" in typ
    if optional and raw.lower() in ("none", ""):
        return None
    base = typ.split("|")[0]
    try:
        if base == "bool":
            low = raw.lower()
            if low in _TRUE:
                return True
            if low in _FALSE:
                return False
            raise ValueError(raw)
        if base == "int":
            return int(raw)
        if base == "float":
            return float(raw)
    except ValueError:
        raise ValueError(f"bad value for {key}: {raw!r} (expected {base})") from None
    return raw


def parse_kv(text: str, cls=None) -> dict:
    """Parse ``key=value`` lines (``#`` comments allowed).

    With a dataclass ``cls``, values are converted to the field types and
    unknown keys are rejected.
    """
    out = {}
    types = {f.name: f.type for f in dataclasses.fields(cls)} if cls is not None else None
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {n}: expected key=value, got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        key = key.replace("-", "_")
        if types is not None:
            if key not in types:
                raise KeyError(f"unknown configuration key {key!r}")
            out[key] = _convert(value, types[key], key)
        else:
            out[key] = value
    return out


def format_kv(values: dict) -> str:
    return "".join(f"{k}={v}\n" for k, v in values.items())


def read_config(path) -> dict[str, str]:
    return parse_kv(Path(path).read_text(encoding="utf-8"))


def split_config(raw: dict[str, str], *classes) -> list[dict]:
    """Distribute raw key=value pairs over several dataclasses, converting types."""
    parts: list[dict] = [{} for _ in classes]
    for key, value in raw.items():
        key = key.replace("-", "_")
        for part, cls in zip(parts, classes):
            types = {f.name: f.type for f in dataclasses.fields(cls)}
            if key in types:
                part[key] = value if not isinstance(value, str) else _convert(value, types[key], key)
                break
        else:
            raise KeyError(f"unknown configuration key {key!r}")
    return parts
