"""Shared plumbing: seeded rng derivation, key=value config files, float text."""

from __future__ import annotations

import zlib
from pathlib import Path

import numpy as np


def stable_hash(text: str) -> int:
    """Process-independent 32-bit hash of a string (crc32)."""
    return zlib.crc32(text.encode("utf-8"))


def derive_rng(master_seed: int, *keys) -> np.random.Generator:
    """Derive an independent generator from a master seed and a key path.

    String keys are crc32-hashed so the stream does not depend on
    PYTHONHASHSEED or on the order frames happen to be processed in.
    """
    entropy = [int(master_seed)]
    for k in keys:
        entropy.append(stable_hash(k) if isinstance(k, str) else int(k))
    return np.random.default_rng(np.random.SeedSequence(entropy))


def fmt_float(x: float) -> str:
    """Shortest round-trip decimal text for a float (deterministic)."""
    return repr(float(x))


def parse_kv_file(path) -> dict[str, str]:
    """Parse a `key = value` config file; `#` starts a comment line.

    Values are kept as raw strings; callers coerce types. Blank lines are
    skipped, later keys override earlier ones.
    """
    out: dict[str, str] = {}
    text = Path(path).read_text(encoding="utf-8")
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected 'key = value', got {raw!r}")
        key, _, value = line.partition("=")
        out[key.strip()] = value.strip()
    return out


def parse_list(value: str, cast=float) -> list:
    """Comma-separated list; empty string means empty list."""
    value = value.strip()
    if not value:
        return []
    return [cast(item.strip()) for item in value.split(",")]


def parse_bool(value: str) -> bool:
    v = value.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {value!r}")
