"""Flat key=value manifest files and content hashing."""

from __future__ import annotations

import hashlib
from pathlib import Path


def write_kv(path, entries: dict) -> None:
    """Write entries as sorted `key=value` lines (diff-friendly)."""
    lines = [f"{k}={entries[k]}" for k in sorted(entries)]
    Path(path).write_text("\n".join(lines) + "\n", encoding="ascii")


def read_kv(path) -> dict[str, str]:
    out: dict[str, str] = {}
    for line in Path(path).read_text(encoding="ascii").splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ValueError(f"malformed manifest line: {line!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()
