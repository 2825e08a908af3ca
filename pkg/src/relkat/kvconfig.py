"""Structured key-value text files: experiment configs and run manifests.

Format: one ``key = value`` pair per line, ``#`` comments, blank lines
ignored.  Keys are dotted paths; values are plain strings interpreted by a
per-command schema that rejects unknown keys.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from pathlib import Path
from typing import Any

from .errors import ConfigError


def parse_kv_text(text: str, source: str = "<config>") -> dict[str, str]:
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {line!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        value = value.strip()
        if not key:
            raise ConfigError(f"{source}:{lineno}: empty key")
        if key in out:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}", key=key)
        out[key] = value
    return out


def read_kv(path: Path) -> dict[str, str]:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    return parse_kv_text(path.read_text(encoding="utf-8"), source=str(path))


def format_kv(mapping: dict[str, Any]) -> str:
    lines = []
    for key, value in mapping.items():
        if isinstance(value, float):
            value = repr(value)
        lines.append(f"{key} = {value}")
    return "\n".join(lines) + "\n"


def write_kv(path: Path, mapping: dict[str, Any]) -> None:
    Path(path).write_text(format_kv(mapping), encoding="utf-8")


_PARSERS = {
    "str": lambda s: s,
    "int": int,
    "float": float,
    "bool": lambda s: {"true": True, "false": False}[s.lower()],
    "str_list": lambda s: [part.strip() for part in s.split(",") if part.strip()],
    "int_list": lambda s: [int(part) for part in s.split(",") if part.strip()],
    "float_list": lambda s: [float(part) for part in s.split(",") if part.strip()],
}


@dataclass
class Field:
    kind: str
    default: Any = None
    required: bool = False


class Schema:
    """Typed key set for one command; unknown keys are rejected by name."""

    def __init__(self, fields: dict[str, Field]):
        self.fields = fields

    def resolve(self, raw: dict[str, str]) -> dict[str, Any]:
        for key in raw:
            if key not in self.fields:
                raise ConfigError(f"unknown config key {key!r}", key=key)
        out: dict[str, Any] = {}
        for key, field in self.fields.items():
            if key in raw:
                try:
                    out[key] = _PARSERS[field.kind](raw[key])
                except (ValueError, KeyError) as exc:
                    raise ConfigError(
                        f"config key {key!r}: cannot parse {raw[key]!r} as {field.kind}",
                        key=key,
                    ) from exc
            elif field.required:
                raise ConfigError(f"missing required config key {key!r}", key=key)
            else:
                out[key] = field.default
        return out


def sha256_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def sha256_file(path: Path) -> str:
    return sha256_bytes(Path(path).read_bytes())


def echo_config(resolved: dict[str, Any]) -> dict[str, str]:
    """Manifest lines for a fully resolved config."""
    out: dict[str, str] = {}
    for key in sorted(resolved):
        value = resolved[key]
        if isinstance(value, list):
            out[f"config.{key}"] = ", ".join(
                repr(v) if isinstance(v, float) else str(v) for v in value
            )
        elif isinstance(value, float):
            out[f"config.{key}"] = repr(value)
        elif value is None:
            out[f"config.{key}"] = ""
        else:
            out[f"config.{key}"] = str(value)
    return out
