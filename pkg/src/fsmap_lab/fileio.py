"""Deterministic file output and line-oriented config handling.

All files are written atomically (temp file + rename) and contain no
timestamps or environment-dependent content, so identical configurations
produce byte-identical outputs.
"""

from __future__ import annotations

import os
import tempfile
from pathlib import Path

from .errors import DomainError


def format_value(v) -> str:
    """Shortest round-trip representation; floats use repr, bools lowercase."""
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, (list, tuple)):
        return ";".join(format_value(x) for x in v)
    return str(v)


def atomic_write_text(path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_csv(path, header, rows) -> None:
    """Write a CSV with one header row; cells are pre-formatted via
    :func:`format_value`."""
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(format_value(v) for v in row))
    atomic_write_text(path, "\n".join(lines) + "\n")


def write_config_resolved(out_dir, config: dict) -> None:
    """Record every effective configuration value as ``key = value`` lines."""
    lines = [f"{k} = {format_value(v)}" for k, v in sorted(config.items())]
    atomic_write_text(Path(out_dir) / "config.resolved", "\n".join(lines) + "\n")


def parse_config_file(path) -> dict:
    """Parse a line-oriented ``key = value`` override file.

    Blank lines and ``#`` comments are ignored; malformed lines are
    rejected.
    """
    out = {}
    for ln_no, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise DomainError(f"{path}:{ln_no}: expected 'key = value', got {raw!r}")
        key, _, value = line.partition("=")
        out[key.strip()] = value.strip()
    return out


def default_out_root() -> Path:
    return Path(os.environ.get("FSMAP_OUT_DIR", "runs"))
