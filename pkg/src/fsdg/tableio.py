"""Small CSV helpers with byte-stable round trips.

Cells are written as strings: ints plainly, floats via ``repr`` (so
re-reading and re-writing a file reproduces it byte for byte). Newlines
are always ``\\n``.
"""

from __future__ import annotations

import csv
from pathlib import Path

import numpy as np


def format_cell(value) -> str:
    if isinstance(value, str):
        return value
    if isinstance(value, (bool, np.bool_)):
        return str(bool(value))
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return str(value)


def write_rows(path: str | Path, header: list[str], rows) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([format_cell(v) for v in row])


def read_rows(path: str | Path) -> tuple[list[str], list[list[str]]]:
    """Read back header and rows; cells stay strings."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        return header, [row for row in reader]


def write_matrix(path: str | Path, matrix: np.ndarray, labels) -> None:
    """Square matrix with a leading label column and labeled columns."""
    labels = [str(l) for l in labels]
    header = ["class"] + labels
    rows = [[labels[i]] + [format_cell(v) for v in matrix[i]] for i in range(len(labels))]
    write_rows(path, header, rows)


def write_dicts(path: str | Path, rows: list[dict]) -> None:
    if not rows:
        raise ValueError("no rows to write")
    header = list(rows[0])
    write_rows(path, header, [[r[k] for k in header] for r in rows])
