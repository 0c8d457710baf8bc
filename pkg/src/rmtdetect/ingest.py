"""Measurement loading, row standardization and sliding windows."""

from __future__ import annotations

import csv
import enum
import struct
from collections.abc import Sequence
from dataclasses import dataclass, field
from datetime import datetime
from pathlib import Path

import numpy as np

from .errors import (
    DegenerateRowError,
    DuplicateIdError,
    FormatError,
    InsufficientDataError,
    NumericError,
    ParseError,
    ShapeError,
)

SIDECAR_MAGIC = b"RMTW"
JITTER_SCALE = 1e-6
MOMENT_TOL = 1e-9


class Quantity(str, enum.Enum):
    ACTIVE_POWER = "activePower"
    VOLTAGE_MAGNITUDE = "voltageMagnitude"
    CURRENT = "current"


@dataclass
class RawSeriesSet:
    node_ids: list[str]
    sample_period: float
    values: np.ndarray
    quantity: Quantity = Quantity.ACTIVE_POWER
    timestamps: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        self.values = np.atleast_2d(np.asarray(self.values, dtype=float))
        self.node_ids = [str(n) for n in self.node_ids]
        self.quantity = Quantity(self.quantity)
        if self.values.shape[1] < 1:
            raise ShapeError("series must contain at least one sample")
        if len(self.node_ids) != self.values.shape[0]:
            raise ShapeError(
                f"{len(self.node_ids)} node ids for {self.values.shape[0]} rows"
            )
        seen = set()
        for n in self.node_ids:
            if n in seen:
                raise DuplicateIdError(f"duplicate node id {n!r}")
            seen.add(n)

    @property
    def N(self) -> int:
        return self.values.shape[0]

    @property
    def T_total(self) -> int:
        return self.values.shape[1]

    def row(self, node_id) -> np.ndarray:
        return self.values[self.node_ids.index(str(node_id))]


@dataclass(frozen=True)
class TimeSeriesWindow:
    """An N x T block of row-standardized samples starting at ``start_index``."""

    data: np.ndarray
    start_index: int = 0
    check: bool = field(default=True, repr=False, compare=False)

    def __post_init__(self):
        data = np.asarray(self.data, dtype=float)
        if data.ndim != 2:
            raise ShapeError("window data must be two-dimensional")
        n, t = data.shape
        if n > t:
            raise ShapeError(f"window has N={n} > T={t}; aspect ratio must be <= 1")
        if self.check:
            if not np.all(np.isfinite(data)):
                raise NumericError("window contains non-finite entries")
            mu = data.mean(axis=1)
            var = data.var(axis=1)
            if np.max(np.abs(mu)) > MOMENT_TOL or np.max(np.abs(var - 1.0)) > MOMENT_TOL:
                raise ShapeError("window rows are not standardized")
        data.setflags(write=False)
        object.__setattr__(self, "data", data)

    @property
    def N(self) -> int:
        return self.data.shape[0]

    @property
    def T(self) -> int:
        return self.data.shape[1]

    @property
    def c(self) -> float:
        return self.N / self.T


def _parse_timestamp(text: str, row: int) -> float:
    try:
        return float(text)
    except ValueError:
        pass
    try:
        return datetime.fromisoformat(text.strip()).timestamp()
    except ValueError:
        raise ParseError(f"row {row}: unparseable timestamp {text!r}", row, 0) from None


def load_csv(path, quantity=Quantity.ACTIVE_POWER) -> RawSeriesSet:
    """Read ``timestamp,v_1..v_N`` records into node-major rows.

    The header's first cell names the time column; the rest are node ids.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise FormatError(f"{path}: empty file") from None
        node_ids = [h.strip() for h in header[1:]]
        if not node_ids:
            raise FormatError(f"{path}: header lists no nodes")
        if len(set(node_ids)) != len(node_ids):
            dup = sorted({n for n in node_ids if node_ids.count(n) > 1})
            raise DuplicateIdError(f"{path}: duplicate node ids {dup}")
        stamps, rows = [], []
        for i, rec in enumerate(reader, start=2):
            if not rec or all(not c.strip() for c in rec):
                continue
            if len(rec) != len(header):
                raise ParseError(
                    f"{path}:{i}: expected {len(header)} fields, got {len(rec)}", i, None
                )
            stamps.append(_parse_timestamp(rec[0], i))
            vals = []
            for j, cell in enumerate(rec[1:], start=1):
                try:
                    v = float(cell)
                except ValueError:
                    raise ParseError(
                        f"{path}:{i}: column {j} ({node_ids[j - 1]}): bad number {cell!r}",
                        i,
                        j,
                    ) from None
                if not np.isfinite(v):
                    raise ParseError(f"{path}:{i}: column {j}: missing or non-finite value", i, j)
                vals.append(v)
            rows.append(vals)
    if not rows:
        raise FormatError(f"{path}: no data records")
    stamps = np.asarray(stamps)
    period = 0.0
    if len(stamps) > 1:
        steps = np.diff(stamps)
        period = float(steps[0])
        if period <= 0 or np.any(np.abs(steps - period) > 0.01 * period):
            raise FormatError(f"{path}: timestamps are not uniformly spaced")
    return RawSeriesSet(node_ids, period, np.asarray(rows).T, Quantity(quantity), stamps)


def write_csv(series: RawSeriesSet, path, time_label="timestamp", fmt="%.10g"):
    path = Path(path)
    stamps = series.timestamps
    if stamps is None:
        stamps = np.arange(series.T_total) * series.sample_period
    table = np.column_stack([stamps, series.values.T])
    header = ",".join([time_label, *series.node_ids])
    np.savetxt(path, table, delimiter=",", header=header, comments="", fmt=fmt)
    return path


def standardize_rows(raw, *, jitter=False, seed=0, node_ids=None) -> np.ndarray:
    """Per-row z-scores with population variance.

    Constant rows raise unless ``jitter`` is set, in which case seeded noise
    of relative size 1e-6 is added before standardizing.
    """
    x = np.array(raw, dtype=float, ndmin=2)
    if not np.all(np.isfinite(x)):
        raise NumericError("non-finite entries in matrix")
    mu = x.mean(axis=-1, keepdims=True)
    sd = x.std(axis=-1, keepdims=True)
    flat = (sd <= 1e-12 * np.maximum(1.0, np.abs(mu))).reshape(x.shape[:-1])
    if np.any(flat):
        idx = np.argwhere(flat)
        if not jitter:
            r = int(idx[0][-1])
            name = node_ids[r] if node_ids is not None else r
            raise DegenerateRowError(f"row {name} has zero variance", node=name)
        rng = np.random.default_rng(seed)
        for pos in map(tuple, idx):
            scale = JITTER_SCALE * max(abs(float(mu[pos][0])), 1.0)
            x[pos] = x[pos] + scale * rng.standard_normal(x.shape[-1])
        mu = x.mean(axis=-1, keepdims=True)
        sd = x.std(axis=-1, keepdims=True)
    z = (x - mu) / sd
    # second pass removes rounding residue so moments sit well inside 1e-9
    z -= z.mean(axis=-1, keepdims=True)
    z /= np.sqrt(np.mean(z * z, axis=-1, keepdims=True))
    return z


def window_count(T_total: int, T: int, step: int) -> int:
    if step < 1:
        raise ValueError("step must be >= 1")
    if T > T_total:
        raise InsufficientDataError(f"window length {T} exceeds {T_total} samples")
    return (T_total - T) // step + 1


def window_stack(values, T: int, step: int = 1, first: int = 0, count=None,
                 *, jitter=False, seed=0) -> np.ndarray:
    """Standardized windows ``first .. first+count-1`` as a (count, N, T) array."""
    values = np.asarray(values, dtype=float)
    total = window_count(values.shape[1], T, step)
    if count is None:
        count = total - first
    view = np.lib.stride_tricks.sliding_window_view(values, T, axis=1)
    view = view[:, first * step:(first + count - 1) * step + 1:step]
    return standardize_rows(np.moveaxis(view, 1, 0), jitter=jitter, seed=seed)


class WindowSequence(Sequence):
    """Lazy, indexable sequence of standardized windows."""

    def __init__(self, values, T, step, jitter=False, seed=0):
        self._values = values
        self.T = T
        self.step = step
        self._jitter = jitter
        self._seed = seed
        self._n = window_count(values.shape[1], T, step)
        if values.shape[0] > T:
            raise ShapeError(f"N={values.shape[0]} > T={T}; aspect ratio must be <= 1")

    def __len__(self):
        return self._n

    def __getitem__(self, i):
        if isinstance(i, slice):
            return [self[k] for k in range(*i.indices(self._n))]
        if i < 0:
            i += self._n
        if not 0 <= i < self._n:
            raise IndexError(i)
        start = i * self.step
        block = self._values[:, start:start + self.T]
        data = standardize_rows(block, jitter=self._jitter, seed=self._seed + i)
        return TimeSeriesWindow(data, start)


def sliding_windows(series: RawSeriesSet, T: int, step: int = 1, *, jitter=False,
                    seed=0) -> WindowSequence:
    return WindowSequence(series.values, T, step, jitter=jitter, seed=seed)


def write_sidecar(matrix, path):
    m = np.ascontiguousarray(matrix, dtype="<f8")
    n, t = m.shape
    with open(path, "wb") as fh:
        fh.write(SIDECAR_MAGIC)
        fh.write(struct.pack("<II", n, t))
        fh.write(m.tobytes(order="C"))
    return path


def read_sidecar(path) -> np.ndarray:
    blob = Path(path).read_bytes()
    if blob[:4] != SIDECAR_MAGIC:
        raise FormatError(f"{path}: bad sidecar magic")
    n, t = struct.unpack("<II", blob[4:12])
    payload = blob[12:]
    if len(payload) != 8 * n * t:
        raise FormatError(f"{path}: payload size does not match {n}x{t}")
    return np.frombuffer(payload, dtype="<f8").reshape(n, t).copy()
