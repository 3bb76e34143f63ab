"""Shared TSV plumbing: canonical float formatting, writers, readers.

All numeric output uses 17 significant digits, which round-trips IEEE
doubles exactly. Output files may start with ``#``-prefixed comment lines
(the CLI uses them to echo the run configuration); readers skip them.
"""

from __future__ import annotations

import csv
from typing import Iterable, Sequence

import numpy as np

from .errors import ParseError, ShapeError


def fmt_float(x) -> str:
    """Canonical decimal rendering of a float (17 significant digits)."""
    return format(float(x), ".17g")


def fmt_value(x) -> str:
    if isinstance(x, bool) or isinstance(x, np.bool_):
        return "true" if x else "false"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        return fmt_float(x)
    return str(x)


def write_table(path, header: Sequence[str], rows: Iterable[Sequence],
                comments: Sequence[str] = ()) -> None:
    """Write a TSV file with optional leading ``#`` comment lines."""
    with open(path, "w", newline="") as fh:
        for line in comments:
            fh.write("# " + line + "\n")
        fh.write("\t".join(header) + "\n")
        for row in rows:
            fh.write("\t".join(fmt_value(v) for v in row) + "\n")


def read_table(path, delimiter: str = "\t"):
    """Read a delimited file, skipping comment lines.

    Returns ``(header, rows)`` where rows is a list of string lists.
    Raises ShapeError on ragged rows.
    """
    header = None
    rows = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh, delimiter=delimiter)
        for lineno, rec in enumerate(reader, start=1):
            if not rec or (rec[0].startswith("#") and header is None):
                continue
            if rec[0].startswith("#"):
                continue
            if header is None:
                header = rec
                continue
            if len(rec) != len(header):
                raise ShapeError(
                    f"{path}: line {lineno} has {len(rec)} fields, "
                    f"expected {len(header)}"
                )
            rows.append(rec)
    if header is None:
        raise ParseError(f"{path}: no header row found")
    return header, rows


def parse_float(token: str, where: str) -> float:
    """Parse one numeric cell; NaN/Inf and garbage are ParseError."""
    try:
        value = float(token)
    except ValueError:
        raise ParseError(f"{where}: cannot parse {token!r} as a number") from None
    if not np.isfinite(value):
        raise ParseError(f"{where}: non-finite value {token!r}")
    return value
