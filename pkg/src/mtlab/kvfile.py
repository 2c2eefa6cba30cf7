"""Plain-text ``key=value`` files used for configs, plans and manifests.

Lines starting with ``#`` are comments.  Blank lines separate blocks; a
config file is a single block, a manifest or plan has one block per entry.
"""

from __future__ import annotations

from pathlib import Path


class FormatError(ValueError):
    pass


def parse_blocks(text: str, source: str = "<string>") -> list[dict[str, str]]:
    blocks: list[dict[str, str]] = []
    current: dict[str, str] = {}
    for ln, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if line.startswith("#"):
            continue
        if not line:
            if current:
                blocks.append(current)
                current = {}
            continue
        if "=" not in line:
            raise FormatError(f"{source}:{ln}: expected key=value, got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise FormatError(f"{source}:{ln}: empty key")
        if key in current:
            raise FormatError(f"{source}:{ln}: duplicate key {key!r}")
        current[key] = value
    if current:
        blocks.append(current)
    return blocks


def parse(text: str, source: str = "<string>") -> dict[str, str]:
    """Parse a single-block file (blank lines are allowed and ignored)."""
    merged: dict[str, str] = {}
    for block in parse_blocks(text, source):
        for key, value in block.items():
            if key in merged:
                raise FormatError(f"{source}: duplicate key {key!r}")
            merged[key] = value
    return merged


def read(path: str | Path) -> dict[str, str]:
    return parse(Path(path).read_text(encoding="utf-8"), str(path))


def read_blocks(path: str | Path) -> list[dict[str, str]]:
    return parse_blocks(Path(path).read_text(encoding="utf-8"), str(path))


def dumps(values: dict[str, object]) -> str:
    return "".join(f"{k}={v}\n" for k, v in values.items())


def as_bool(value: str) -> bool:
    v = value.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise FormatError(f"not a boolean: {value!r}")
