"""Delimited metrics tables with locale-free, byte-reproducible formatting."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

from .errors import ContractViolation, DataFormatError


def format_real(x: float) -> str:
    """9 significant digits, '.' decimal point, no locale dependence."""
    return "%.9g" % float(x)


def format_cell(v) -> str:
    if isinstance(v, bool):
        return "1" if v else "0"
    if isinstance(v, int):
        return str(v)
    if isinstance(v, float):
        return format_real(v)
    s = str(v)
    if "," in s or "\n" in s:
        raise ContractViolation(f"cell value {s!r} would break the delimiter")
    return s


@dataclass
class MetricsTable:
    header: tuple[str, ...]
    rows: list[tuple]

    def __post_init__(self):
        self.header = tuple(self.header)
        for r in self.rows:
            if len(r) != len(self.header):
                raise ContractViolation(
                    f"row width {len(r)} != header width {len(self.header)}")

    def append(self, row: Sequence) -> None:
        row = tuple(row)
        if len(row) != len(self.header):
            raise ContractViolation(
                f"row width {len(row)} != header width {len(self.header)}")
        for v in row:
            format_cell(v)  # fail fast on unserializable values
        self.rows.append(row)

    def to_bytes(self) -> bytes:
        lines = [",".join(self.header)]
        lines += [",".join(format_cell(v) for v in row) for row in self.rows]
        return ("\n".join(lines) + "\n").encode("utf-8")

    def save(self, path: str) -> None:
        with open(path, "wb") as f:
            f.write(self.to_bytes())


def load_table(path: str) -> tuple[tuple[str, ...], list[list[str]]]:
    """Read a table back as strings; callers coerce columns as needed."""
    with open(path, "rb") as f:
        text = f.read().decode("utf-8")
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines:
        raise DataFormatError(f"{path}: empty table")
    header = tuple(lines[0].split(","))
    rows = []
    for i, line in enumerate(lines[1:], start=2):
        cells = line.split(",")
        if len(cells) != len(header):
            raise DataFormatError(f"{path}: line {i} has {len(cells)} cells, "
                                  f"header has {len(header)}")
        rows.append(cells)
    return header, rows
