"""Flat ``key = value`` text files used for configs and serialized parameters."""
from __future__ import annotations

from pathlib import Path

FORMAT_VERSION = 1


class ConfigError(ValueError):
    pass


def parse_kv(text, source="<string>"):
    out = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key in out:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        out[key] = value
    return out


def read_kv(path):
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    return parse_kv(p.read_text(encoding="utf-8"), str(p))


def dumps_kv(mapping, header=True):
    lines = [f"# format-version {FORMAT_VERSION}"] if header else []
    lines += [f"{k} = {v}" for k, v in mapping.items()]
    return "\n".join(lines) + "\n"


def floats(text):
    return [float(x) for x in text.split()] if text.strip() else []


def fmt_floats(values):
    return " ".join(repr(float(x)) for x in values)


def as_bool(text):
    t = str(text).strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {text!r}")
