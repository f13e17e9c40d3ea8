"""Flat key=value config files and dotted-path overrides.

The on-disk format is deliberately dumb: one `key = value` per line, `#`
comments, no nesting.  Dotted keys express grouping (`loss.use_gan`), and
command-line overrides are merged last-writer-wins so ablation runs are
one-flag variations of a base file.
"""

from __future__ import annotations

from pathlib import Path

from .errors import ConfigError


def parse_scalar(text: str):
    """Best-effort typed view of a config value: bool, int, float, or str."""
    s = text.strip()
    low = s.lower()
    if low in ("true", "false"):
        return low == "true"
    if low in ("none", "null", ""):
        return None
    try:
        return int(s)
    except ValueError:
        pass
    try:
        return float(s)
    except ValueError:
        pass
    return s


def parse_flat(text: str) -> dict:
    """Parse `key = value` lines into an ordered string->string mapping."""
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {line!r}")
        key, value = line.split("=", 1)
        key = key.strip()
        if not key:
            raise ConfigError(f"line {lineno}: empty key")
        out[key] = value.strip()
    return out


def format_flat(mapping: dict) -> str:
    lines = []
    for key, value in mapping.items():
        if value is None:
            value = "none"
        elif isinstance(value, bool):
            value = "true" if value else "false"
        lines.append(f"{key} = {value}")
    return "\n".join(lines) + "\n"


def read_config(path) -> dict:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_flat(text)


def write_config(path, mapping: dict) -> None:
    Path(path).write_text(format_flat(mapping))


def apply_overrides(mapping: dict, overrides) -> dict:
    """Merge `key=value` override strings over a config, last writer wins."""
    merged = dict(mapping)
    for item in overrides or ():
        if "=" not in item:
            raise ConfigError(f"override must look like key=value, got {item!r}")
        key, value = item.split("=", 1)
        key = key.strip()
        if not key:
            raise ConfigError(f"override has an empty key: {item!r}")
        merged[key] = value.strip()
    return merged
