"""Sensor CSV ingestion, 30 s grid regularization and chronological splits."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Mapping, NamedTuple, Sequence

import numpy as np
import pandas as pd

from .errors import (
    BoundaryOutsideSeries,
    DuplicateTimestamp,
    EmptySeries,
    MalformedRow,
    MissingColumn,
)

log = logging.getLogger(__name__)

SAMPLE_PERIOD = 30
DEFAULT_MAX_GAP = 600

DEFAULT_SCHEMA = {
    "timestamp": "timestamp",
    "co2": "co2_ppm",
    "t_indoor": "t_indoor_c",
    "rh": "rh_pct",
    "occupied": "occupied",
}

# physical plausibility bounds, values outside are clamped and counted
RANGES = {
    "co2": (300.0, 10000.0),
    "t_indoor": (-10.0, 50.0),
    "rh": (0.0, 100.0),
}

CONTINUOUS = ("co2", "t_indoor", "rh")


class SensorRecord(NamedTuple):
    timestamp: int
    co2: float
    t_indoor: float
    rh: float
    occupied: int


def _frozen(a: np.ndarray, dtype) -> np.ndarray:
    a = np.ascontiguousarray(a, dtype=dtype)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class SensorSeries:
    """Column-oriented, read-only view of a sensor stream.

    Records are exposed via iteration / indexing as :class:`SensorRecord`;
    internally each channel is one numpy array.
    """

    timestamp: np.ndarray
    co2: np.ndarray
    t_indoor: np.ndarray
    rh: np.ndarray
    occupied: np.ndarray
    sample_period: int = SAMPLE_PERIOD
    source_id: str = ""
    diagnostics: dict = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "timestamp", _frozen(self.timestamp, np.int64))
        for name in CONTINUOUS:
            object.__setattr__(self, name, _frozen(getattr(self, name), np.float64))
        object.__setattr__(self, "occupied", _frozen(self.occupied, np.int8))
        n = len(self.timestamp)
        for name in (*CONTINUOUS, "occupied"):
            if len(getattr(self, name)) != n:
                raise ValueError(f"channel {name} has length {len(getattr(self, name))}, expected {n}")

    def __len__(self) -> int:
        return len(self.timestamp)

    def __getitem__(self, i: int) -> SensorRecord:
        return SensorRecord(int(self.timestamp[i]), float(self.co2[i]), float(self.t_indoor[i]),
                            float(self.rh[i]), int(self.occupied[i]))

    def __iter__(self) -> Iterator[SensorRecord]:
        for i in range(len(self)):
            yield self[i]

    @property
    def records(self) -> list[SensorRecord]:
        return list(self)

    def slice(self, start: int, stop: int) -> "SensorSeries":
        return SensorSeries(self.timestamp[start:stop], self.co2[start:stop],
                            self.t_indoor[start:stop], self.rh[start:stop],
                            self.occupied[start:stop], self.sample_period, self.source_id)

    def equals(self, other: "SensorSeries") -> bool:
        return (len(self) == len(other)
                and np.array_equal(self.timestamp, other.timestamp)
                and all(np.array_equal(getattr(self, c), getattr(other, c)) for c in CONTINUOUS)
                and np.array_equal(self.occupied, other.occupied))

    def is_regular(self) -> bool:
        return len(self) < 2 or bool(np.all(np.diff(self.timestamp) == self.sample_period))


@dataclass(frozen=True)
class SplitSpec:
    """Chronological split boundaries (epoch seconds). Test is the remainder."""

    train_end: float
    val_end: float

    @classmethod
    def from_dict(cls, d: Mapping) -> "SplitSpec":
        return cls(_parse_time(d["train_end"]), _parse_time(d["val_end"]))

    def to_dict(self) -> dict:
        return {"train_end": self.train_end, "val_end": self.val_end}


def _parse_time(v) -> float:
    """Epoch seconds or ISO-8601 (naive strings are taken as UTC)."""
    try:
        return float(v)
    except (TypeError, ValueError):
        ts = pd.Timestamp(v)
        if ts.tzinfo is None:
            ts = ts.tz_localize("UTC")
        return ts.timestamp()


def _parse_timestamps(col: pd.Series) -> np.ndarray:
    numeric = pd.to_numeric(col, errors="coerce")
    if numeric.notna().all():
        return numeric.to_numpy(dtype=np.float64)
    try:
        parsed = pd.to_datetime(col, utc=True, format="ISO8601")
    except (ValueError, TypeError):
        bad = int(np.flatnonzero(numeric.isna().to_numpy())[0])
        raise MalformedRow(bad + 2, col.name, col.iloc[bad]) from None
    return (parsed - pd.Timestamp(0, tz="UTC")).dt.total_seconds().to_numpy()


def load_csv(path: str | Path, schema: Mapping[str, str] | None = None,
             source_id: str | None = None) -> SensorSeries:
    """Read a sensor CSV and return its records sorted by timestamp.

    ``schema`` maps the canonical channel names (timestamp, co2, t_indoor, rh,
    occupied) to CSV column names. Rows with empty cells are dropped (they
    become gaps for :func:`regularize`); non-numeric cells raise
    :class:`MalformedRow` with the 1-based file line number. Out-of-range
    readings are clamped and counted in ``diagnostics["clamped"]``.
    """
    schema = {**DEFAULT_SCHEMA, **(schema or {})}
    df = pd.read_csv(path, dtype=str, keep_default_na=False, float_precision="round_trip")
    missing = [schema[k] for k in DEFAULT_SCHEMA if schema[k] not in df.columns]
    if missing:
        raise MissingColumn(f"{path}: missing column(s) {missing}")

    cols = {k: df[schema[k]].str.strip() for k in DEFAULT_SCHEMA}
    blank = np.zeros(len(df), dtype=bool)
    for c in cols.values():
        blank |= (c == "").to_numpy()
    if blank.any():
        log.info("%s: dropping %d incomplete row(s)", path, int(blank.sum()))

    lines = np.arange(len(df)) + 2  # header is line 1
    keep = ~blank
    values = {}
    for k in ("co2", "t_indoor", "rh", "occupied"):
        col = cols[k][keep]
        try:
            # numpy's str -> float is correctly rounded (pandas' fast parser is not)
            values[k] = col.to_numpy(dtype=object).astype(np.float64)
            bad = ~np.isfinite(values[k])
        except ValueError:
            bad = pd.to_numeric(col, errors="coerce").isna().to_numpy()
        if bad.any():
            i = int(np.flatnonzero(bad)[0])
            raise MalformedRow(int(lines[keep][i]), schema[k], col.iloc[i])
    occ = values["occupied"]
    bad = ~np.isin(occ, (0.0, 1.0))
    if bad.any():
        i = int(np.flatnonzero(bad)[0])
        raise MalformedRow(int(lines[keep][i]), schema["occupied"], occ[i])
    ts = _parse_timestamps(cols["timestamp"][keep].rename(schema["timestamp"]))
    ts = np.round(ts).astype(np.int64)

    order = np.argsort(ts, kind="stable")
    ts = ts[order]
    dup = np.flatnonzero(np.diff(ts) == 0)
    if dup.size:
        raise DuplicateTimestamp(f"{path}: duplicate timestamp {int(ts[dup[0]])}")

    clamped = {}
    for k in CONTINUOUS:
        lo, hi = RANGES[k]
        v = values[k][order]
        n_bad = int(np.count_nonzero((v < lo) | (v > hi)))
        clamped[k] = n_bad
        values[k] = np.clip(v, lo, hi)
    diagnostics = {"clamped": clamped, "dropped_incomplete": int(blank.sum())}
    return SensorSeries(ts, values["co2"], values["t_indoor"], values["rh"],
                        occ[order].astype(np.int8), SAMPLE_PERIOD,
                        source_id if source_id is not None else Path(path).stem, diagnostics)


def write_csv(series: SensorSeries, path: str | Path, schema: Mapping[str, str] | None = None) -> None:
    """Write ``series`` with lossless float formatting (shortest round-trip repr)."""
    schema = {**DEFAULT_SCHEMA, **(schema or {})}
    df = pd.DataFrame({
        schema["timestamp"]: series.timestamp,
        schema["co2"]: series.co2,
        schema["t_indoor"]: series.t_indoor,
        schema["rh"]: series.rh,
        schema["occupied"]: series.occupied.astype(np.int64),
    })
    df.to_csv(path, index=False, lineterminator="\n")


def regularize(series: SensorSeries, max_gap: float = DEFAULT_MAX_GAP) -> list[SensorSeries]:
    """Resample onto the epoch-aligned 30 s grid.

    Gaps up to ``max_gap`` seconds are bridged: continuous channels by linear
    interpolation, occupancy by carrying the last observation forward. Larger
    gaps split the stream and each segment is returned separately.
    """
    if len(series) == 0:
        raise EmptySeries("cannot regularize an empty series")
    period = series.sample_period
    if max_gap < period:
        raise ValueError(f"max_gap ({max_gap}) must be >= sample period ({period})")
    ts = series.timestamp
    cuts = np.flatnonzero(np.diff(ts) > max_gap) + 1
    bounds = np.concatenate(([0], cuts, [len(ts)]))
    segments = []
    for a, b in zip(bounds[:-1], bounds[1:]):
        t = ts[a:b]
        first = -(-t[0] // period) * period
        last = (t[-1] // period) * period
        if last < first:
            continue
        grid = np.arange(first, last + 1, period, dtype=np.int64)
        if len(grid) == len(t) and np.array_equal(grid, t):
            segments.append(series.slice(a, b))
            continue
        idx = np.searchsorted(t, grid, side="right") - 1
        seg = SensorSeries(
            grid,
            np.interp(grid, t, series.co2[a:b]),
            np.interp(grid, t, series.t_indoor[a:b]),
            np.interp(grid, t, series.rh[a:b]),
            series.occupied[a:b][idx],
            period, series.source_id,
            {"filled": int(len(grid) - np.isin(grid, t).sum())},
        )
        segments.append(seg)
    if not segments:
        raise EmptySeries("no grid point falls inside the series")
    return segments


def split(series: SensorSeries | np.ndarray, spec: SplitSpec) -> tuple[range, range, range]:
    """Half-open chronological split; a record exactly on a boundary goes to the later set."""
    ts = series.timestamp if isinstance(series, SensorSeries) else np.asarray(series)
    if len(ts) == 0:
        raise EmptySeries("cannot split an empty series")
    if not (ts[0] < spec.train_end < spec.val_end <= ts[-1]):
        raise BoundaryOutsideSeries(
            f"need first ({ts[0]}) < train_end ({spec.train_end}) < val_end ({spec.val_end})"
            f" <= last ({ts[-1]})")
    i = int(np.searchsorted(ts, spec.train_end, side="left"))
    j = int(np.searchsorted(ts, spec.val_end, side="left"))
    return range(0, i), range(i, j), range(j, len(ts))


def concat(segments: Sequence[SensorSeries]) -> tuple[SensorSeries, np.ndarray]:
    """Join regularized segments; returns the series and a per-row segment id."""
    seg_id = np.concatenate([np.full(len(s), k, dtype=np.int32) for k, s in enumerate(segments)])
    joined = SensorSeries(
        np.concatenate([s.timestamp for s in segments]),
        np.concatenate([s.co2 for s in segments]),
        np.concatenate([s.t_indoor for s in segments]),
        np.concatenate([s.rh for s in segments]),
        np.concatenate([s.occupied for s in segments]),
        segments[0].sample_period, segments[0].source_id,
    )
    return joined, seg_id
