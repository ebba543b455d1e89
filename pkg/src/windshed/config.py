"""Flat ``section.key = value`` config files.

Blank lines and lines starting with ``#`` are ignored.  Values are parsed as
Python literals where possible (numbers, booleans, tuples, quoted strings)
and kept as bare strings otherwise.
"""
from __future__ import annotations

import ast
import dataclasses
import hashlib
import json
from pathlib import Path


class ConfigError(ValueError):
    pass


def parse_value(raw: str):
    raw = raw.strip()
    if raw.lower() in ("true", "false"):
        return raw.lower() == "true"
    try:
        return ast.literal_eval(raw)
    except (ValueError, SyntaxError):
        return raw


def parse_config(text: str, source: str = "<config>") -> dict:
    out: dict = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'section.key = value', got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if "." not in key:
            raise ConfigError(f"{source}:{lineno}: key {key!r} has no section")
        section, name = key.split(".", 1)
        out.setdefault(section, {})[name] = parse_value(value)
    return out


def load_config(path) -> dict:
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"config file not found: {p}")
    return parse_config(p.read_text(), str(p))


def format_config(cfg: dict) -> str:
    lines = []
    for section in sorted(cfg):
        for key in sorted(cfg[section]):
            v = cfg[section][key]
            lines.append(f"{section}.{key} = {v!r}" if isinstance(v, (str, tuple, list)) else f"{section}.{key} = {v}")
    return "\n".join(lines) + "\n"


def config_hash(cfg: dict) -> str:
    blob = json.dumps(cfg, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()


def build_dataclass(cls, values: dict | None, section: str = ""):
    """Instantiate ``cls`` from a section dict, rejecting unknown keys."""
    values = dict(values or {})
    names = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(values) - set(names))
    if unknown:
        raise ConfigError(f"unknown keys in section [{section or cls.__name__}]: {unknown}")
    for k, v in values.items():
        if isinstance(v, list):
            values[k] = tuple(v)
    return cls(**values)
