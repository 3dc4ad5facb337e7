"""Flat ``key=value`` configuration shared by model configs, checkpoints and the CLI."""

from __future__ import annotations

import dataclasses
from pathlib import Path
from typing import Any, Mapping, TypeVar

T = TypeVar("T")

_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def _coerce(value: Any, kind: str) -> Any:
    if not isinstance(value, str):
        return value
    if kind == "bool":
        v = value.strip().lower()
        if v in _TRUE:
            return True
        if v in _FALSE:
            return False
        raise ValueError(f"not a boolean: {value!r}")
    if kind == "int":
        return int(value)
    if kind == "float":
        return float(value)
    return value


def from_mapping(cls: type[T], mapping: Mapping[str, Any], strict: bool = False) -> T:
    """Build dataclass ``cls`` from string or typed values; unknown keys are ignored unless strict."""
    fields = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in mapping.items():
        if key not in fields:
            if strict:
                raise KeyError(f"unknown config key {key!r} for {cls.__name__}")
            continue
        kwargs[key] = _coerce(value, str(fields[key].type))
    return cls(**kwargs)


def to_mapping(obj) -> dict[str, str]:
    return {k: _format(v) for k, v in dataclasses.asdict(obj).items()}


def _format(v: Any) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def parse_kv(text: str, source: str = "<config>") -> dict[str, str]:
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{source}:{lineno}: expected key=value, got {raw!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def dump_kv(mapping: Mapping[str, Any]) -> str:
    return "".join(f"{k}={_format(v)}\n" for k, v in mapping.items())


def load_kv(path: str | Path) -> dict[str, str]:
    path = Path(path)
    return parse_kv(path.read_text(encoding="utf-8"), str(path))
