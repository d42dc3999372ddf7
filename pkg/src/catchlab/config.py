"""Line-oriented key-value config files (`link.1.mass = 1.2`).

Shared by robot profiles and run configs. Values are parsed as bool, int,
float, or bare string; '#' starts a comment.
"""

from __future__ import annotations

from pathlib import Path


class ConfigError(ValueError):
    """Malformed config line or missing required key."""


def parse_value(raw: str):
    raw = raw.strip()
    low = raw.lower()
    if low in ("true", "false"):
        return low == "true"
    try:
        return int(raw)
    except ValueError:
        pass
    try:
        return float(raw)
    except ValueError:
        pass
    return raw


def loads(text: str) -> dict:
    out = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, raw = body.split("=", 1)
        key = key.strip()
        if not key:
            raise ConfigError(f"line {lineno}: empty key")
        out[key] = parse_value(raw)
    return out


def load(path) -> dict:
    return loads(Path(path).read_text())


def dumps(entries: dict) -> str:
    lines = []
    for key, value in entries.items():
        if isinstance(value, bool):
            value = "true" if value else "false"
        elif isinstance(value, float):
            value = repr(value)
        lines.append(f"{key} = {value}")
    return "\n".join(lines) + "\n"


def dump(path, entries: dict) -> None:
    Path(path).write_text(dumps(entries))


def group(entries: dict, prefix: str) -> dict:
    """Sub-view of dotted keys: group({'link.1.mass': 2}, 'link.1') -> {'mass': 2}."""
    pre = prefix + "."
    return {k[len(pre):]: v for k, v in entries.items() if k.startswith(pre)}


def indexed_groups(entries: dict, prefix: str) -> list[dict]:
    """All `prefix.<i>.*` groups ordered by index, 1-based and contiguous."""
    indices = set()
    pre = prefix + "."
    for key in entries:
        if key.startswith(pre):
            idx = key[len(pre):].split(".", 1)[0]
            if idx.isdigit():
                indices.add(int(idx))
    if not indices:
        return []
    if min(indices) != 1 or max(indices) != len(indices):
        raise ConfigError(f"{prefix} indices must be contiguous from 1, got {sorted(indices)}")
    return [group(entries, f"{prefix}.{i}") for i in range(1, len(indices) + 1)]
