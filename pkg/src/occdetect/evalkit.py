"""Classification metrics and F1-maximizing threshold calibration."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.stats import rankdata

from .errors import EmptySet, NoPositives

# percentile grid 1..99 in steps of 0.5
LO_PCT = 1.0
HI_PCT = 99.0
N_GRID = 197

REPORT_FIELDS = ("precision", "recall", "f1", "accuracy", "auc_roc")


@dataclass(frozen=True)
class ScoredSet:
    scores: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        s = np.asarray(self.scores, dtype=np.float64).ravel()
        y = np.asarray(self.labels).ravel()
        if len(s) != len(y):
            raise ValueError(f"{len(s)} scores but {len(y)} labels")
        if len(np.unique(y)) > 2:
            raise ValueError("labels must be binary")
        object.__setattr__(self, "scores", s)
        object.__setattr__(self, "labels", (y > 0).astype(np.int8))

    def __len__(self):
        return len(self.scores)


def roc_auc(scores, labels) -> float:
    """Mann-Whitney AUC; tied scores count one half. NaN if a class is absent."""
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel() > 0
    n_pos = int(y.sum())
    n_neg = len(y) - n_pos
    if n_pos == 0 or n_neg == 0:
        return float("nan")
    ranks = rankdata(s)  # average ranks for ties
    u = ranks[y].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def confusion_matrix(scores, labels, threshold: float) -> np.ndarray:
    """2x2 counts, rows = true class (vacant, occupied), cols = predicted."""
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel() > 0
    pred = s >= threshold
    tp = int(np.count_nonzero(pred & y))
    fp = int(np.count_nonzero(pred & ~y))
    fn = int(np.count_nonzero(~pred & y))
    tn = len(y) - tp - fp - fn
    return np.array([[tn, fp], [fn, tp]], dtype=np.int64)


def confusion_row_normalize(confusion) -> np.ndarray:
    c = np.asarray(confusion, dtype=np.float64)
    totals = c.sum(axis=1, keepdims=True)
    return np.divide(c, totals, out=np.zeros_like(c), where=totals > 0)


@dataclass
class EvalReport:
    precision: float
    recall: float
    f1: float
    accuracy: float
    auc_roc: float
    confusion: list
    confusion_row_norm: list
    threshold: float
    n: int
    flags: list = field(default_factory=list)

    @classmethod
    def from_confusion(cls, confusion: np.ndarray, auc: float, threshold: float) -> "EvalReport":
        (tn, fp), (fn, tp) = confusion.tolist()
        n = tn + fp + fn + tp
        flags = []
        if tp + fp == 0:
            flags.append("precision_undefined")
        if tp + fn == 0:
            flags.append("recall_undefined")
        precision = tp / (tp + fp) if tp + fp else 0.0
        recall = tp / (tp + fn) if tp + fn else 0.0
        f1 = 2 * tp / (2 * tp + fp + fn) if tp else 0.0
        if math.isnan(auc):
            flags.append("auc_undefined")
        return cls(precision, recall, f1, (tp + tn) / n, auc, confusion.tolist(),
                   confusion_row_normalize(confusion).tolist(), float(threshold), n, flags)

    def to_dict(self) -> dict:
        d = asdict(self)
        if math.isnan(d["auc_roc"]):
            d["auc_roc"] = None
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        d = dict(d)
        if d.get("auc_roc") is None:
            d["auc_roc"] = float("nan")
        return cls(**d)

    def to_json(self, **extra) -> str:
        return json.dumps({**extra, **self.to_dict()}, indent=2, sort_keys=True)

    def csv_row(self, **leading) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow([*leading.values(), *(f"{getattr(self, k):.4f}" for k in REPORT_FIELDS)])
        return buf.getvalue()

    @staticmethod
    def csv_header(*leading: str) -> str:
        return ",".join([*leading, "precision", "recall", "f1", "accuracy", "auc_roc"]) + "\n"


def compute_metrics(test: ScoredSet, threshold: float) -> EvalReport:
    """Predict occupied iff score >= threshold; metrics for the positive class."""
    if len(test) == 0:
        raise EmptySet("cannot evaluate an empty set")
    cm = confusion_matrix(test.scores, test.labels, threshold)
    return EvalReport.from_confusion(cm, roc_auc(test.scores, test.labels), threshold)


def f1_at(scores: np.ndarray, labels: np.ndarray, thresholds: np.ndarray) -> np.ndarray:
    """Positive-class F1 for each candidate threshold (vectorized)."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels) > 0
    all_sorted = np.sort(s)
    pos_sorted = np.sort(s[y])
    t = np.asarray(thresholds, dtype=np.float64)
    n_pred = len(s) - np.searchsorted(all_sorted, t, side="left")
    tp = len(pos_sorted) - np.searchsorted(pos_sorted, t, side="left")
    denom = len(pos_sorted) + n_pred
    return np.divide(2.0 * tp, denom, out=np.zeros(len(t)), where=denom > 0)


def threshold_candidates(scores, lo_pct=LO_PCT, hi_pct=HI_PCT, n_grid=N_GRID) -> np.ndarray:
    s = np.asarray(scores, dtype=np.float64)
    grid = np.percentile(s, np.linspace(lo_pct, hi_pct, n_grid))
    # the minimum score stands for "predict everything occupied"
    return np.unique(np.concatenate(([s.min()], grid)))


def select_threshold(val: ScoredSet, lo_pct: float = LO_PCT, hi_pct: float = HI_PCT,
                     n_grid: int = N_GRID) -> float:
    """Threshold maximizing validation F1 over a percentile grid of the scores.

    Ties go to the larger threshold (fewer false positives).
    """
    if not np.any(val.labels):
        raise NoPositives("validation set has no positive samples")
    cand = threshold_candidates(val.scores, lo_pct, hi_pct, n_grid)
    f1 = f1_at(val.scores, val.labels, cand)
    best = len(cand) - 1 - int(np.argmax(f1[::-1]))
    return float(cand[best])
