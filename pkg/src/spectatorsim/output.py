"""Deterministic CSV emission with metadata headers and atomic writes.

Every file starts with '#'-prefixed metadata lines (tool version, seed,
config hash, command line) so a rerun with identical inputs is
byte-identical.  Files are written to a temporary name and renamed into
place, so a failed run never leaves a partial CSV behind.
"""

from __future__ import annotations

import os
import tempfile
from typing import Iterable, Mapping, Sequence


def format_cell(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (int,)) and not isinstance(value, bool):
        return str(value)
    if isinstance(value, float):
        return repr(value)
    if value is None:
        return ""
    try:
        import numpy as np
        if isinstance(value, np.integer):
            return str(int(value))
        if isinstance(value, np.floating):
            return repr(float(value))
    except ImportError:  # pragma: no cover
        pass
    return str(value)


def write_csv(path: str, meta: Mapping[str, str], columns: Sequence[str],
              rows: Iterable[Sequence]) -> None:
    """Write '#key: value' metadata, a column header, then the rows."""
    lines = [f"# {key}: {val}" for key, val in meta.items()]
    lines.append(",".join(columns))
    for row in rows:
        if len(row) != len(columns):
            raise ValueError(f"row width {len(row)} != {len(columns)} columns")
        lines.append(",".join(format_cell(v) for v in row))
    _atomic_write(path, "\n".join(lines) + "\n")


def write_text(path: str, meta: Mapping[str, str], body: str) -> None:
    lines = [f"# {key}: {val}" for key, val in meta.items()]
    _atomic_write(path, "\n".join(lines) + "\n" + body + "\n")


def _atomic_write(path: str, content: str) -> None:
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=".csv")
    try:
        with os.fdopen(fd, "w") as handle:
            handle.write(content)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def read_csv(path: str) -> tuple[dict[str, str], list[str], list[list[str]]]:
    """Inverse of write_csv: (metadata, columns, string rows)."""
    meta: dict[str, str] = {}
    columns: list[str] = []
    rows: list[list[str]] = []
    with open(path) as handle:
        for line in handle:
            line = line.rstrip("\n")
            if not line:
                continue
            if line.startswith("#"):
                body = line.lstrip("# ")
                if ":" in body:
                    key, val = body.split(":", 1)
                    meta[key.strip()] = val.strip()
                continue
            if not columns:
                columns = line.split(",")
            else:
                rows.append(line.split(","))
    return meta, columns, rows
