"""Run configuration: sectioned key=value files with a stable content hash.

The format is deliberately minimal and diff-able:

    [section]
    key = value
    # comment

Values stay strings at the parsing layer; consumers coerce.  The hash is
computed over a canonical serialization (sorted sections and keys), so
it is stable under reordering, and every run directory stores its
resolved config next to the hash for later verification.
"""

from __future__ import annotations

import hashlib
from pathlib import Path

__all__ = [
    "parse_config", "load_config", "dump_config", "config_hash",
    "save_config", "verify_config_dir", "set_override", "get",
]


def parse_config(text: str) -> dict[str, dict[str, str]]:
    cfg: dict[str, dict[str, str]] = {}
    section = "default"
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1].strip()
            if not section:
                raise ValueError(f"empty section name at line {lineno}")
            cfg.setdefault(section, {})
            continue
        if "=" not in line:
            raise ValueError(f"expected key=value at line {lineno}: {raw!r}")
        key, value = line.split("=", 1)
        key = key.strip()
        if not key:
            raise ValueError(f"empty key at line {lineno}")
        cfg.setdefault(section, {})[key] = value.strip()
    return cfg


def load_config(path) -> dict[str, dict[str, str]]:
    return parse_config(Path(path).read_text())


def dump_config(cfg) -> str:
    """Canonical serialization: sections and keys sorted."""
    lines = []
    for section in sorted(cfg):
        lines.append(f"[{section}]")
        for key in sorted(cfg[section]):
            lines.append(f"{key} = {cfg[section][key]}")
        lines.append("")
    return "\n".join(lines)


def config_hash(cfg) -> str:
    return hashlib.sha256(dump_config(cfg).encode()).hexdigest()[:16]


def save_config(cfg, directory):
    """Write the resolved config and its hash into a run directory."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    (directory / "config.cfg").write_text(dump_config(cfg))
    (directory / "config.hash").write_text(config_hash(cfg) + "\n")


def verify_config_dir(directory):
    """Recompute the stored config's hash; mismatch fails loudly."""
    directory = Path(directory)
    cfg = load_config(directory / "config.cfg")
    stored = (directory / "config.hash").read_text().strip()
    actual = config_hash(cfg)
    if stored != actual:
        raise ValueError(
            f"config hash mismatch in {directory}: stored {stored}, "
            f"recomputed {actual}")
    return cfg


def set_override(cfg, dotted_key: str, value):
    """Apply a 'section.key=value' style override in place."""
    if "." not in dotted_key:
        raise ValueError(f"override needs section.key, got {dotted_key!r}")
    section, key = dotted_key.split(".", 1)
    cfg.setdefault(section, {})[key] = str(value)
    return cfg


def get(cfg, section, key, default=None, cast=str):
    try:
        return cast(cfg[section][key])
    except KeyError:
        if default is None:
            raise KeyError(f"config missing [{section}] {key}")
        return default
