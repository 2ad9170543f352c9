"""CSV readers and writers for scans, receiver tracks, truth and estimates."""

from __future__ import annotations

import csv
import logging
import math
from collections import defaultdict
from pathlib import Path

import numpy as np

from .assoc import TdoaScan
from .geometry import ReceiverState, SourceState

log = logging.getLogger(__name__)

MEASUREMENT_COLUMNS = ("scan_index", "timestamp_s", "tdoa_s")
RECEIVER_COLUMNS = ("scan_index", "timestamp_s", "depth_m")
TRUTH_COLUMNS = ("scan_index", "range_m", "depth_m", "speed_mps")

# timestamps of the two files are compared with this slack
TIME_TOL = 1e-6


class DataError(ValueError):
    def __init__(self, message: str, path=None, row: int | None = None):
        where = str(path) if path is not None else ""
        if row is not None:
            where += f" row {row}"
        super().__init__(f"{where}: {message}" if where else message)
        self.path = path
        self.row = row


def fmt(x: float) -> str:
    # shortest repr that round-trips exactly
    return repr(float(x))


def write_csv(path, columns, rows) -> None:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(columns)
            for row in rows:
                w.writerow([fmt(v) if isinstance(v, (float, np.floating)) else v for v in row])
    except OSError as exc:
        raise DataError(f"cannot write: {exc.strerror}", path) from None


def read_rows(path, columns) -> list[tuple[int, list[str]]]:
    """Rows as ``(row_number, fields)``; the header is row 1.

    A completely empty file counts as a header-only file.
    """
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise DataError(f"cannot read: {exc.strerror}", path) from None
    reader = csv.reader(text.splitlines())
    rows = [(i, r) for i, r in enumerate(reader, 1) if any(f.strip() for f in r)]
    if not rows:
        return []
    (_, header), body = rows[0], rows[1:]
    header = [h.strip() for h in header]
    if tuple(header) != tuple(columns):
        raise DataError(f"expected header {','.join(columns)}, got {','.join(header)}", path, 1)
    for i, r in body:
        if len(r) != len(columns):
            raise DataError(f"expected {len(columns)} fields, got {len(r)}", path, i)
    return body


def _number(text: str, kind, path, row: int, column: str):
    try:
        v = kind(text.strip())
    except ValueError:
        raise DataError(f"{column}: not a number: {text!r}", path, row) from None
    if kind is float and not math.isfinite(v):
        raise DataError(f"{column}: non-finite value {text!r}", path, row)
    return v


def write_scans(path, scans) -> None:
    rows = ((s.time_index, s.timestamp, z) for s in scans for z in s.measurements)
    write_csv(path, MEASUREMENT_COLUMNS, rows)


def write_receiver(path, scans_or_indices, timestamps=None, depths=None) -> None:
    """Receiver file from scans plus depths, or from explicit indices and timestamps."""
    if timestamps is None:
        scans = list(scans_or_indices)
        indices = [s.time_index for s in scans]
        timestamps = [s.timestamp for s in scans]
    else:
        indices = list(scans_or_indices)
    depths = [r.depth if isinstance(r, ReceiverState) else r for r in depths]
    write_csv(path, RECEIVER_COLUMNS, zip(indices, map(float, timestamps), map(float, depths)))


def write_truth(path, indices, states) -> None:
    rows = ((n, s.range, s.depth, s.range_speed) for n, s in zip(indices, states))
    write_csv(path, TRUTH_COLUMNS, rows)


def read_receiver(path) -> tuple[list[int], list[float], list[ReceiverState]]:
    idx, ts, rx = [], [], []
    seen = set()
    for i, r in read_rows(path, RECEIVER_COLUMNS):
        n = _number(r[0], int, path, i, "scan_index")
        t = _number(r[1], float, path, i, "timestamp_s")
        h = _number(r[2], float, path, i, "depth_m")
        if n in seen:
            raise DataError(f"duplicate scan_index {n}", path, i)
        if h < 0:
            raise DataError(f"negative depth {h}", path, i)
        if idx and (n <= idx[-1] or t < ts[-1]):
            raise DataError("scan_index and timestamp_s must increase", path, i)
        seen.add(n)
        idx.append(n)
        ts.append(t)
        rx.append(ReceiverState(h))
    return idx, ts, rx


def ingest_scans(measurements_path, receiver_path) -> tuple[list[TdoaScan], list[ReceiverState]]:
    """Group measurement rows into scans, one scan per receiver row.

    The receiver file defines the scan sequence; scans without measurement
    rows are empty.  Every measurement row must name a receiver scan and carry
    the same timestamp.
    """
    idx, ts, receivers = read_receiver(receiver_path)
    if not idx:
        raise DataError("no scans", receiver_path)
    time_of = dict(zip(idx, ts))
    grouped: dict[int, list[float]] = defaultdict(list)
    for i, r in read_rows(measurements_path, MEASUREMENT_COLUMNS):
        n = _number(r[0], int, measurements_path, i, "scan_index")
        t = _number(r[1], float, measurements_path, i, "timestamp_s")
        z = _number(r[2], float, measurements_path, i, "tdoa_s")
        if n not in time_of:
            raise DataError(f"scan_index {n} not in receiver file", measurements_path, i)
        if abs(t - time_of[n]) > TIME_TOL:
            raise DataError(
                f"timestamp {t} misaligned with receiver timestamp {time_of[n]} for scan {n}",
                measurements_path, i,
            )
        if z < 0:
            raise DataError(f"negative TDOA {z}", measurements_path, i)
        grouped[n].append(z)
    scans = [TdoaScan(n, t, tuple(grouped.get(n, ()))) for n, t in zip(idx, ts)]
    counts = [s.count for s in scans]
    log.info("ingested %d scans, %d measurements (max %d per scan)",
             len(scans), sum(counts), max(counts))
    return scans, receivers


def read_truth(path) -> tuple[list[int], list[SourceState]]:
    idx, states = [], []
    for i, r in read_rows(path, TRUTH_COLUMNS):
        n = _number(r[0], int, path, i, "scan_index")
        vals = [_number(v, float, path, i, c) for v, c in zip(r[1:], TRUTH_COLUMNS[1:])]
        try:
            states.append(SourceState(*vals))
        except ValueError as exc:
            raise DataError(str(exc), path, i) from None
        idx.append(n)
    return idx, states
