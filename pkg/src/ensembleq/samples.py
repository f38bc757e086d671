"""Sample table generation, loading, and token bindings.

Samples are kept as decimal strings end to end: generated values are
formatted with Python's shortest round-trip float repr, stored in CSV,
and substituted into commands verbatim, so no binary float format ever
crosses a process or language boundary.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field

from .errors import ConfigError, SampleFileError
from .rng import Xoshiro256StarStar
from .specfile import SampleConfig

SAMPLES_FILENAME = "samples.csv"


@dataclass
class SampleSet:
    """An N-row table of per-sample variable values."""

    columns: list[str] = field(default_factory=list)
    rows: list[list[str]] = field(default_factory=list)

    @property
    def n(self) -> int:
        return len(self.rows)


def _format(value: float) -> str:
    return repr(value)


def _grid_side(n: int, ncols: int) -> int:
    """Smallest m with m**ncols >= n."""
    m = 1
    while m**ncols < n:
        m += 1
    return m


def generate_samples(config: SampleConfig) -> SampleSet:
    """Produce the sample table described by a SampleConfig.

    ``uniform`` draws i.i.d. values per column in [min, max), row-major,
    deterministic under the seed. ``grid`` lays an evenly spaced lattice
    (endpoints inclusive) and truncates it row-major to n rows. ``file``
    loads rows from a CSV; a first record equal to the configured column
    names is treated as a header.
    """
    cols = list(config.column_names)
    if config.kind == "file":
        return _load_file_source(config, cols)

    if config.vmin >= config.vmax:
        raise ConfigError(
            f"sample generator requires min < max, got [{config.vmin}, {config.vmax})"
        )
    n = config.count
    if config.kind == "uniform":
        rng = Xoshiro256StarStar(config.seed)
        rows = [
            [_format(rng.uniform(config.vmin, config.vmax)) for _ in cols]
            for _ in range(n)
        ]
        return SampleSet(columns=cols, rows=rows)
    if config.kind == "grid":
        if not cols or n == 0:
            return SampleSet(columns=cols, rows=[[] for _ in range(n)] if not cols else [])
        m = _grid_side(n, len(cols))
        span = config.vmax - config.vmin
        points = (
            [config.vmin]
            if m == 1
            else [config.vmin + k * span / (m - 1) for k in range(m)]
        )
        rows = []
        for i in range(n):
            row = []
            for j in range(len(cols)):
                digit = (i // m ** (len(cols) - 1 - j)) % m
                row.append(_format(points[digit]))
            rows.append(row)
        return SampleSet(columns=cols, rows=rows)
    raise ConfigError(f"unknown sample generator kind {config.kind!r}")


def _load_file_source(config: SampleConfig, cols: list[str]) -> SampleSet:
    path = config.path or ""
    if not os.path.isfile(path):
        raise SampleFileError(f"sample file not found: {path}")
    with open(path, "r", encoding="utf-8", newline="") as fh:
        records = [row for row in csv.reader(fh) if row]
    if records and records[0] == cols:
        records = records[1:]
    for i, row in enumerate(records):
        if len(row) != len(cols):
            raise SampleFileError(
                f"{path}: row {i + 1} has {len(row)} fields, expected {len(cols)}"
            )
    return SampleSet(columns=cols, rows=records)


def sample_bindings(samples: SampleSet, index: int) -> dict[str, str]:
    """Token bindings for one sample row: SAMPLE_ID plus SAMPLE.<col>."""
    if not 0 <= index < samples.n:
        raise IndexError(f"sample index {index} out of range [0, {samples.n})")
    bindings = {"SAMPLE_ID": str(index)}
    for col, value in zip(samples.columns, samples.rows[index]):
        bindings[f"SAMPLE.{col}"] = value
    return bindings


def write_samples_csv(samples: SampleSet, path: str) -> None:
    """Write the table as CSV with a header row and LF line endings."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(samples.columns)
        writer.writerows(samples.rows)


def load_samples_csv(path: str) -> SampleSet:
    """Load a table previously written by write_samples_csv."""
    if not os.path.isfile(path):
        raise SampleFileError(f"samples file not found: {path}")
    with open(path, "r", encoding="utf-8", newline="") as fh:
        records = list(csv.reader(fh))
    if not records:
        raise SampleFileError(f"{path}: missing header row")
    columns, rows = records[0], records[1:]
    for i, row in enumerate(rows):
        if len(row) != len(columns):
            raise SampleFileError(
                f"{path}: row {i + 1} has {len(row)} fields, expected {len(columns)}"
            )
    return SampleSet(columns=columns, rows=rows)
