"""Plain-text ``key=value`` configuration files and config hashing."""
from __future__ import annotations

import dataclasses
import hashlib
from pathlib import Path
from typing import Any, Mapping, TypeVar

C = TypeVar("C")


class ConfigError(ValueError):
    pass


def parse_kv(text: str, source: str = "<config>") -> dict[str, str]:
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key=value, got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ConfigError(f"{source}:{lineno}: empty key")
        out[key] = value
    return out


def read_kv(path: str | Path) -> dict[str, str]:
    return parse_kv(Path(path).read_text(), str(path))


def _coerce(value: str, typ: Any, key: str):
    name = typ if isinstance(typ, str) else getattr(typ, "__name__", str(typ))
    try:
        if name == "bool":
            if value.lower() in ("1", "true", "yes", "on"):
                return True
            if value.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(value)
        if name == "int":
            return int(value)
        if name == "float":
            return float(value)
    except ValueError:
        raise ConfigError(f"{key}: cannot read {value!r} as {name}") from None
    return value


def from_kv(cls: type[C], values: Mapping[str, str], *, strict: bool = True) -> C:
    """Build dataclass ``cls`` from string values; unknown keys raise when ``strict``."""
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(values) - set(fields)
    if strict and unknown:
        raise ConfigError(f"unknown config keys for {cls.__name__}: {sorted(unknown)}")
    kwargs = {k: _coerce(v, fields[k].type, k) for k, v in values.items() if k in fields}
    return cls(**kwargs)


def to_kv(obj) -> str:
    lines = []
    for f in dataclasses.fields(obj):
        v = getattr(obj, f.name)
        lines.append(f"{f.name}={v!r}" if isinstance(v, float) else f"{f.name}={v}")
    return "\n".join(lines) + "\n"


def config_hash(*objs) -> str:
    """sha256 over the canonical ``key=value`` rendering of each config, first 16 hex chars."""
    h = hashlib.sha256()
    for obj in objs:
        h.update(type(obj).__name__.encode())
        h.update(to_kv(obj).encode())
    return h.hexdigest()[:16]
