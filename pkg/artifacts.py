"""
File artifacts: field grids as CSV, metrics tables, loss curves and PGM
heatmaps.
"""

import csv
import logging
from pathlib import Path
from typing import IO, Optional, Tuple, Union

import numpy as np

from eval_finetune import MetricsReport
from reference import FieldGrid
from training import ProgressRecord

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]


class FieldCsvError(ValueError):
    """A field CSV does not have the expected layout."""


def write_field_csv(field: FieldGrid, path: PathLike) -> Path:
    """Header ``t\\x,x_0,...``; one row ``t_i,u(t_i,x_0),...`` per time."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = "t\\x," + ",".join(repr(float(x)) for x in field.x_vals)
    table = np.column_stack([field.t_vals, field.values])
    np.savetxt(path, table, delimiter=",", fmt="%.17g", header=header, comments="")
    return path


def read_field_csv(path: PathLike) -> FieldGrid:
    path = Path(path)
    with path.open("r", encoding="utf-8") as f:
        header = f.readline().strip().split(",")
        if len(header) < 3 or header[0] != "t\\x":
            raise FieldCsvError(f"{path}: first row must be 't\\x' followed by x values")
        try:
            x_vals = np.array([float(v) for v in header[1:]])
            table = np.loadtxt(f, delimiter=",", ndmin=2)
        except ValueError as e:
            raise FieldCsvError(f"{path}: {e}") from e
    if table.shape[0] < 1 or table.shape[1] != len(x_vals) + 1:
        raise FieldCsvError(f"{path}: expected {len(x_vals) + 1} columns, got {table.shape[1]}")
    try:
        return FieldGrid(t_vals=table[:, 0].copy(), x_vals=x_vals, values=table[:, 1:].copy())
    except ValueError as e:
        raise FieldCsvError(f"{path}: {e}") from e


METRIC_COLUMNS = ("label", "l1", "l2", "linf", "rms")


def write_metrics_csv(report: MetricsReport, path: PathLike) -> Path:
    """One row per initial condition, then a ``mean`` row."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(METRIC_COLUMNS)
        for row in report.per_ic:
            writer.writerow([row.label, repr(row.l1), repr(row.l2), repr(row.linf), repr(row.rms)])
        writer.writerow(["mean", repr(report.l1), repr(report.l2), repr(report.linf), repr(report.rms)])
    return path


class ProgressCsv:
    """Loss-curve sink; use as a context manager and pass to ``train``.

    ``last`` holds the most recent record, or None before the first step.
    """

    def __init__(self, path: PathLike):
        self.path = Path(path)
        self._file: Optional[IO[str]] = None
        self._writer = None
        self.last: Optional[ProgressRecord] = None

    def __enter__(self) -> "ProgressCsv":
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._file = self.path.open("w", newline="", encoding="utf-8")
        self._writer = csv.writer(self._file)
        self._writer.writerow(ProgressRecord._fields)
        return self

    def __exit__(self, *exc) -> None:
        if self._file is not None:
            self._file.close()
            self._file = None
        self._writer = None

    def __call__(self, record: ProgressRecord) -> None:
        if self._writer is None:
            raise RuntimeError("ProgressCsv is not open")
        self._writer.writerow([record.step] + [repr(float(v)) for v in record[1:]])
        self.last = record


def to_gray(values: np.ndarray) -> Tuple[np.ndarray, float, float]:
    """Linear map min -> 0, max -> 255; constant fields map to mid gray."""
    low, high = float(values.min()), float(values.max())
    if high == low:
        return np.full(values.shape, 128, dtype=np.uint8), low, high
    scaled = (values - low) / (high - low) * 255.0
    return np.clip(np.rint(scaled), 0, 255).astype(np.uint8), low, high


def write_pgm(field: FieldGrid, path: PathLike) -> Tuple[Path, Path]:
    """Binary PGM, one pixel row per time; min/max go to a ``.txt`` sidecar."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    gray, low, high = to_gray(field.values)
    with path.open("wb") as f:
        f.write(f"P5\n{field.nx} {field.nt}\n255\n".encode("ascii"))
        f.write(gray.tobytes())
    sidecar = path.with_suffix(".txt")
    sidecar.write_text(f"min={low!r}\nmax={high!r}\n", encoding="utf-8")
    logger.debug("Wrote %dx%d heatmap to %s", field.nx, field.nt, path)
    return path, sidecar

