"""Flat ``key = value`` configuration files with dotted namespaces."""
from __future__ import annotations

from pathlib import Path


class ConfigError(ValueError):
    pass


def parse_value(text: str):
    text = text.strip()
    low = text.lower()
    if low in ("true", "false"):
        return low == "true"
    if low in ("none", "null", ""):
        return None
    if "," in text:
        return tuple(parse_value(part) for part in text.split(",") if part.strip())
    for cast in (int, float):
        try:
            return cast(text)
        except ValueError:
            pass
    return text


def format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if value is None:
        return "none"
    if isinstance(value, (tuple, list)):
        # a trailing comma keeps one-element sequences sequences
        return ",".join(format_value(v) for v in value) + ("," if len(value) == 1 else "")
    if isinstance(value, float):
        return repr(value)
    return str(value)


def parse(text: str) -> dict:
    out = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw.strip()!r}")
        key, value = line.split("=", 1)
        key = key.strip()
        if not key or " " in key:
            raise ConfigError(f"line {lineno}: bad key {key!r}")
        out[key] = parse_value(value)
    return out


def serialize(cfg: dict) -> str:
    return "".join(f"{k} = {format_value(v)}\n" for k, v in sorted(cfg.items()))


def load(path) -> dict:
    return parse(Path(path).read_text(encoding="utf-8"))


def dump(path, cfg: dict) -> None:
    Path(path).write_text(serialize(cfg), encoding="utf-8")
