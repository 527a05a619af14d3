"""Helper functions for output files"""

import os
from typing import Iterable, List, Sequence

import numpy as np


def backup_if_exists(filename: str) -> None:
    """Move an existing file out of the way as 'bck.{n}.{filename}'

    The lowest free number n is used, so older backups are kept.
    """
    if not os.path.exists(filename):
        return
    folder, base = os.path.split(filename)
    n = 0
    while True:
        backup = os.path.join(folder, f"bck.{n}.{base}")
        if not os.path.exists(backup):
            os.rename(filename, backup)
            return
        n += 1


def format_row(values: Iterable) -> str:
    """Comma separated row, floats with 10 significant digits"""
    return ",".join(f"{float(v):.10g}" if isinstance(v, (float, np.floating)) else str(v) for v in values)


def initialize_file(filename: str, fields: Sequence[str]) -> None:
    """Create a csv file holding only the header line

    An existing file with the same name is backed up first.
    """
    backup_if_exists(filename)
    with open(filename, "w", encoding="utf-8") as f:
        f.write(",".join(fields) + "\n")


def append_rows(filename: str, rows: Iterable[Iterable]) -> None:
    """Append formatted rows to a csv file"""
    with open(filename, "a", encoding="utf-8") as f:
        for row in rows:
            f.write(format_row(row) + "\n")


def read_csv(filename: str) -> List[List[str]]:
    """Read a csv file written by initialize_file / append_rows, header first"""
    with open(filename, encoding="utf-8") as f:
        return [line.rstrip("\n").split(",") for line in f if line.strip()]
