"""Deterministic CSV emission: RFC-4180 style, stable columns, 9 significant digits."""

from __future__ import annotations

import csv
import io
from pathlib import Path
from typing import Iterable, Sequence, Union

import numpy as np

from .errors import DataError


def format_value(value) -> str:
    """Render one cell: integers verbatim, reals at 9 significant digits."""
    if isinstance(value, (bool, np.bool_)):
        return str(bool(value)).lower()
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        if not np.isfinite(value):
            raise DataError(f"refusing to emit non-finite value {value!r}")
        return f"{float(value):.9g}"
    return str(value)


def emit_csv(header: Sequence[str], rows: Iterable[Sequence],
             path: Union[str, Path]) -> int:
    """Write a CSV file; identical inputs produce byte-identical output."""
    buf = io.StringIO()
    writer = csv.writer(buf)  # csv defaults to the RFC-4180 \r\n terminator
    writer.writerow(list(header))
    for row in rows:
        writer.writerow([format_value(v) for v in row])
    data = buf.getvalue().encode("utf-8")
    Path(path).write_bytes(data)
    return len(data)
