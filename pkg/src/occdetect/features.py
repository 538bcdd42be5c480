"""Shared feature representation.

Every row is ``[co2, t_indoor, rh, co2_slope, winter, spring, summer, autumn]``:
three raw channels, the trailing least-squares CO2 slope (ppm/s), and a
meteorological-season one-hot. Continuous columns are standardized with
statistics from the training rows only.
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .dataset import SensorSeries, SplitSpec, concat, split
from .errors import DegenerateFeature, SeriesTooShort, UnknownFeature

log = logging.getLogger(__name__)

CONTINUOUS_FEATURES = ("co2", "t_indoor", "rh", "co2_slope")
SEASON_FEATURES = ("season_winter", "season_spring", "season_summer", "season_autumn")
FEATURE_NAMES = CONTINUOUS_FEATURES + SEASON_FEATURES

SLOPE_WINDOW = 900.0

MASKS = {
    "all": CONTINUOUS_FEATURES,
    "no-rh-t": ("co2", "co2_slope"),
    "no-co2": ("t_indoor", "rh"),
}

SPLIT_NAMES = ("train", "val", "test")


# ---------------------------------------------------------------------------
# elementary features

def _ls_slope(y: np.ndarray, period: float) -> float:
    k = np.arange(len(y)) * period
    kc = k - k.mean()
    return float(kc @ (y - y.mean()) / (kc @ kc))


def co2_slope(series: SensorSeries | np.ndarray, window: float = SLOPE_WINDOW,
              period: float = 30.0, segment_id: np.ndarray | None = None) -> np.ndarray:
    """Least-squares slope (ppm/s) of CO2 over the trailing ``window`` seconds.

    The window holds ``window / period`` samples ending at ``t`` (30 samples
    for 15 min at 30 s). Near a segment start the fit uses whatever samples
    are available; with fewer than two the slope is 0.
    """
    if isinstance(series, SensorSeries):
        y = series.co2
        period = series.sample_period
    else:
        y = np.asarray(series, dtype=np.float64)
    n = max(int(round(window / period)), 2)
    if segment_id is None:
        segment_id = np.zeros(len(y), dtype=np.int32)
    out = np.zeros(len(y))
    starts = np.flatnonzero(np.diff(segment_id, prepend=segment_id[:1] - 1) != 0)
    stops = np.append(starts[1:], len(y))

    k = np.arange(n) * period
    kc = k - k.mean()
    weights = kc / (kc @ kc)
    for a, b in zip(starts, stops):
        seg = y[a:b]
        m = len(seg)
        for t in range(1, min(n - 1, m)):
            out[a + t] = _ls_slope(seg[: t + 1], period)
        if m >= n:
            out[a + n - 1:b] = sliding_window_view(seg, n) @ weights
    return out


def season_index(timestamps: np.ndarray | int) -> np.ndarray:
    """0=winter (Dec-Feb), 1=spring, 2=summer, 3=autumn, from the UTC month."""
    ts = np.asarray(timestamps, dtype=np.int64)
    month = ts.astype("datetime64[s]").astype("datetime64[M]").astype(np.int64) % 12 + 1
    return (month % 12) // 3


def season_onehot(timestamp) -> np.ndarray:
    idx = season_index(timestamp)
    return np.eye(4, dtype=np.float64)[idx]


def raw_features(series: SensorSeries, segment_id: np.ndarray | None = None,
                 window: float = SLOPE_WINDOW) -> np.ndarray:
    """Unstandardized ``T x 8`` feature matrix."""
    slope = co2_slope(series, window, segment_id=segment_id)
    return np.column_stack([series.co2, series.t_indoor, series.rh, slope,
                            season_onehot(series.timestamp)])


# ---------------------------------------------------------------------------
# standardization

@dataclass(frozen=True)
class Standardizer:
    names: tuple[str, ...]
    mean: np.ndarray
    std: np.ndarray
    degenerate: tuple[bool, ...] = ()

    def transform(self, values: np.ndarray, columns: Sequence[str] = FEATURE_NAMES) -> np.ndarray:
        out = np.array(values, dtype=np.float64, copy=True)
        for j, name in enumerate(self.names):
            if name in columns:
                c = list(columns).index(name)
                out[:, c] = (out[:, c] - self.mean[j]) / self.std[j]
        return out

    def to_dict(self) -> dict:
        return {"names": list(self.names), "mean": self.mean.tolist(),
                "std": self.std.tolist(), "degenerate": list(self.degenerate)}

    @classmethod
    def from_dict(cls, d: dict) -> "Standardizer":
        return cls(tuple(d["names"]), np.asarray(d["mean"], float), np.asarray(d["std"], float),
                   tuple(bool(x) for x in d.get("degenerate", ())))


def fit_standardizer(raw: np.ndarray, train_range: range | slice,
                     names: Sequence[str] = CONTINUOUS_FEATURES,
                     columns: Sequence[str] = FEATURE_NAMES,
                     strict: bool = False) -> Standardizer:
    """Population mean/std of the continuous columns over the training rows.

    A zero-variance column is flagged and its std replaced by 1; with
    ``strict=True`` it raises :class:`DegenerateFeature` instead.
    """
    rows = raw[train_range.start:train_range.stop] if isinstance(train_range, range) else raw[train_range]
    if len(rows) == 0:
        raise ValueError("empty training range")
    idx = [list(columns).index(n) for n in names]
    sub = rows[:, idx]
    mean = sub.mean(axis=0)
    std = sub.std(axis=0)
    degenerate = tuple(bool(s <= 1e-12 * (1.0 + abs(m))) for s, m in zip(std, mean))
    for name, bad in zip(names, degenerate):
        if bad:
            if strict:
                raise DegenerateFeature(f"feature {name!r} is constant on the training rows")
            log.warning("feature %r is constant on the training rows; using std=1", name)
    std = np.where(degenerate, 1.0, std)
    return Standardizer(tuple(names), mean, std, degenerate)


# ---------------------------------------------------------------------------
# feature table

@dataclass(frozen=True, eq=False)
class FeatureTable:
    values: np.ndarray
    labels: np.ndarray
    timestamps: np.ndarray
    segment_id: np.ndarray
    columns: tuple[str, ...] = FEATURE_NAMES
    splits: dict = field(default_factory=dict)
    standardizer: Standardizer | None = None
    source_id: str = ""

    def __post_init__(self):
        if self.values.shape != (len(self.labels), len(self.columns)):
            raise ValueError(f"values shape {self.values.shape} inconsistent with "
                             f"{len(self.labels)} labels / {len(self.columns)} columns")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def d(self) -> int:
        return len(self.columns)

    @property
    def mask_bits(self) -> int:
        return sum(1 << i for i, n in enumerate(FEATURE_NAMES) if n in self.columns)

    @property
    def continuous(self) -> tuple[str, ...]:
        return tuple(c for c in self.columns if c in CONTINUOUS_FEATURES)

    def rows(self, part: str | Iterable[str] | None = None) -> np.ndarray:
        """Integer row indices for one or more named splits (all rows if None)."""
        if part is None:
            return np.arange(len(self))
        parts = [part] if isinstance(part, str) else list(part)
        return np.concatenate([np.arange(self.splits[p].start, self.splits[p].stop) for p in parts])

    def xy(self, part: str | Iterable[str] | None = None) -> tuple[np.ndarray, np.ndarray]:
        idx = self.rows(part)
        return self.values[idx], self.labels[idx]


def build_table(segments: SensorSeries | Sequence[SensorSeries], split_spec: SplitSpec | None = None,
                standardizer: Standardizer | None = None, window: float = SLOPE_WINDOW) -> FeatureTable:
    """Features for regularized segments, standardized.

    With ``standardizer=None`` the statistics are fitted on the training split
    (requires ``split_spec``). Passing a standardizer applies it unchanged,
    which is how frozen models are transferred to other apartments.
    """
    if isinstance(segments, SensorSeries):
        segments = [segments]
    series, seg_id = concat(list(segments))
    raw = raw_features(series, seg_id, window)
    splits = {}
    if split_spec is not None:
        splits = dict(zip(SPLIT_NAMES, split(series, split_spec)))
    if standardizer is None:
        if "train" not in splits:
            raise ValueError("a split spec is needed to fit the standardizer")
        standardizer = fit_standardizer(raw, splits["train"])
    values = standardizer.transform(raw)
    return FeatureTable(values, series.occupied.astype(np.int8), series.timestamp, seg_id,
                        FEATURE_NAMES, splits, standardizer, series.source_id)


def resolve_mask(mask: str | Iterable[str]) -> tuple[str, ...]:
    if isinstance(mask, str):
        if mask in MASKS:
            return MASKS[mask]
        mask = [mask]
    names = tuple(mask)
    unknown = [n for n in names if n not in FEATURE_NAMES]
    if unknown:
        raise UnknownFeature(f"unknown feature(s) {unknown}; known: {list(FEATURE_NAMES)}")
    return tuple(n for n in CONTINUOUS_FEATURES if n in names)


def apply_mask(table: FeatureTable, mask: str | Iterable[str] = "all", model: str = "lr") -> FeatureTable:
    """Restrict ``table`` to the continuous features in ``mask``.

    Season columns are kept for the static models (lr, svm) and dropped for
    the sequence model (lstm).
    """
    keep = list(resolve_mask(mask))
    if model in ("lr", "svm"):
        keep += list(SEASON_FEATURES)
    elif model != "lstm":
        raise ValueError(f"unknown model kind {model!r}")
    for n in keep:
        if n not in table.columns:
            raise UnknownFeature(f"feature {n!r} not present in table columns {table.columns}")
    idx = [table.columns.index(n) for n in keep]
    return replace(table, values=np.ascontiguousarray(table.values[:, idx]), columns=tuple(keep))


# ---------------------------------------------------------------------------
# sequence windows

@dataclass(frozen=True)
class SequenceWindow:
    matrix: np.ndarray  # d x L_seq
    label: int
    end: int


@dataclass(frozen=True, eq=False)
class WindowSet:
    """Windows over a feature matrix, stored as end indices (no copies)."""

    values: np.ndarray
    labels_all: np.ndarray
    ends: np.ndarray
    seq_len: int

    def __len__(self) -> int:
        return len(self.ends)

    def __getitem__(self, i: int) -> SequenceWindow:
        e = int(self.ends[i])
        return SequenceWindow(self.values[e - self.seq_len + 1:e + 1].T, int(self.labels_all[e]), e)

    def __iter__(self) -> Iterator[SequenceWindow]:
        for i in range(len(self)):
            yield self[i]

    @property
    def labels(self) -> np.ndarray:
        return self.labels_all[self.ends]

    @property
    def d(self) -> int:
        return self.values.shape[1]

    def batch(self, idx: np.ndarray | slice | None = None) -> np.ndarray:
        """Stacked windows, shape ``(B, L_seq, d)``."""
        ends = self.ends if idx is None else self.ends[idx]
        offs = np.arange(-self.seq_len + 1, 1)
        return self.values[ends[:, None] + offs]

    def subset(self, idx) -> "WindowSet":
        return replace(self, ends=self.ends[idx])

    @classmethod
    def from_arrays(cls, x: np.ndarray, y: np.ndarray) -> "WindowSet":
        """Pack independent ``(N, L, d)`` windows; used for synthetic toy sets."""
        n, L, d = x.shape
        flat = x.reshape(n * L, d)
        labels = np.zeros(n * L, dtype=np.int8)
        ends = np.arange(n) * L + L - 1
        labels[ends] = y
        return cls(flat, labels, ends, L)


def make_windows(table: FeatureTable, seq_len: int, stride: int = 1,
                 part: str | Iterable[str] | None = None) -> WindowSet:
    """Sliding windows that never cross a split boundary or a segment gap.

    Within every contiguous (split, segment) block starting at row ``s`` the
    windows end at ``s + L - 1, s + L - 1 + stride, ...``.
    """
    if seq_len < 1 or stride < 1:
        raise ValueError("seq_len and stride must be >= 1")
    if part is None:
        parts = [p for p in SPLIT_NAMES if p in table.splits] or [None]
    else:
        parts = [part] if isinstance(part, str) else list(part)
    ends = []
    for p in parts:
        rng = range(len(table)) if p is None else table.splits[p]
        if len(rng) == 0:
            continue
        seg = table.segment_id[rng.start:rng.stop]
        starts = np.flatnonzero(np.diff(seg, prepend=seg[:1] - 1) != 0) + rng.start
        stops = np.append(starts[1:], rng.stop)
        for a, b in zip(starts, stops):
            ends.append(np.arange(a + seq_len - 1, b, stride))
    ends = np.concatenate(ends) if ends else np.zeros(0, dtype=np.int64)
    if len(ends) == 0:
        raise SeriesTooShort(f"no window of length {seq_len} fits in the requested rows")
    return WindowSet(table.values, table.labels, ends.astype(np.int64), seq_len)


# ---------------------------------------------------------------------------
# binary cache
#
# layout (little endian):
#   8s   magic b"OCCFEAT1"
#   q q  d, T
#   H    mask bitmap over FEATURE_NAMES (bit i set <=> column i present)
#   B    has_standardizer
#   6q   train/val/test (start, stop); -1 when absent
#   4d 4d standardizer mean, std (zeros when absent)
#   T*d  float64 values, row-major
#   T    uint8 labels
#   T    int64 timestamps
#   T    int32 segment ids

_MAGIC = b"OCCFEAT1"
_HEADER = struct.Struct("<8sqqHB6q4d4d")


def save_table(table: FeatureTable, path: str | Path) -> None:
    bounds = []
    for p in SPLIT_NAMES:
        r = table.splits.get(p)
        bounds += [r.start, r.stop] if r is not None else [-1, -1]
    st = table.standardizer
    mean = st.mean.tolist() if st is not None else [0.0] * 4
    std = st.std.tolist() if st is not None else [0.0] * 4
    header = _HEADER.pack(_MAGIC, table.d, len(table), table.mask_bits, st is not None,
                          *bounds, *mean, *std)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(np.ascontiguousarray(table.values, dtype="<f8").tobytes())
        fh.write(table.labels.astype(np.uint8).tobytes())
        fh.write(table.timestamps.astype("<i8").tobytes())
        fh.write(table.segment_id.astype("<i4").tobytes())


def load_table(path: str | Path) -> FeatureTable:
    buf = Path(path).read_bytes()
    fields = _HEADER.unpack_from(buf)
    magic, d, T, bits, has_st = fields[:5]
    if magic != _MAGIC:
        raise ValueError(f"{path}: not a feature cache file")
    bounds = fields[5:11]
    mean, std = np.array(fields[11:15]), np.array(fields[15:19])
    columns = tuple(n for i, n in enumerate(FEATURE_NAMES) if bits >> i & 1)
    if len(columns) != d:
        raise ValueError(f"{path}: mask bitmap disagrees with d={d}")
    off = _HEADER.size
    values = np.frombuffer(buf, "<f8", T * d, off).reshape(T, d).copy()
    off += 8 * T * d
    labels = np.frombuffer(buf, np.uint8, T, off).astype(np.int8)
    off += T
    ts = np.frombuffer(buf, "<i8", T, off).copy()
    off += 8 * T
    seg = np.frombuffer(buf, "<i4", T, off).copy()
    splits = {p: range(bounds[2 * i], bounds[2 * i + 1])
              for i, p in enumerate(SPLIT_NAMES) if bounds[2 * i] >= 0}
    st = Standardizer(CONTINUOUS_FEATURES, mean, std) if has_st else None
    return FeatureTable(values, labels, ts, seg, columns, splits, st)
