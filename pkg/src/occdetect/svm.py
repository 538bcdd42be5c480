"""Soft-margin RBF SVM with class-dependent penalties, solved by SMO.

The dual is

    min_a  1/2 a' Q a - sum(a)    s.t.  y' a = 0,  0 <= a_i <= C_{y_i}

with ``Q_ij = y_i y_j K(x_i, x_j)``. Working pairs are chosen with the
maximal-violation rule for ``i`` and the second-order gain for ``j``.
"""

from __future__ import annotations

import logging
import struct
from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionMismatch, NoConvergence, SingleClassTraining

log = logging.getLogger(__name__)

_TAU = 1e-12


@dataclass(frozen=True)
class SVMConfig:
    c: float = 1.0
    gamma: float = 0.1
    class_weight_pos: float | None = None  # None -> N_neg / N_pos
    class_weight_neg: float = 1.0
    max_train_size: int = 100_000
    tol: float = 1e-3
    max_passes: int | None = None  # SMO iterations; None -> 100 * n + 10_000
    cache_rows: int = 4096
    seed: int = 0

    def __post_init__(self):
        if not (self.c > 0 and self.gamma > 0 and self.tol > 0):
            raise ValueError("c, gamma and tol must be positive")


@dataclass
class SVMModel:
    support_vectors: np.ndarray
    dual_coefs: np.ndarray  # alpha_i * y_i
    bias: float
    gamma: float
    threshold: float | None = None
    info: dict = field(default_factory=dict)

    @property
    def n_sv(self) -> int:
        return len(self.dual_coefs)

    # header: n_sv, d, gamma, bias, threshold (NaN when uncalibrated)
    _HEADER = struct.Struct("<8sqqddd")
    _MAGIC = b"OCCSVM01"

    def save(self, path) -> None:
        d = self.support_vectors.shape[1]
        thr = np.nan if self.threshold is None else self.threshold
        with open(path, "wb") as fh:
            fh.write(self._HEADER.pack(self._MAGIC, self.n_sv, d, self.gamma, self.bias, thr))
            fh.write(np.ascontiguousarray(self.support_vectors, "<f8").tobytes())
            fh.write(np.ascontiguousarray(self.dual_coefs, "<f8").tobytes())

    @classmethod
    def load(cls, path) -> "SVMModel":
        buf = open(path, "rb").read()
        magic, n, d, gamma, bias, thr = cls._HEADER.unpack_from(buf)
        if magic != cls._MAGIC:
            raise ValueError(f"{path}: not an SVM model file")
        off = cls._HEADER.size
        sv = np.frombuffer(buf, "<f8", n * d, off).reshape(n, d).copy()
        coef = np.frombuffer(buf, "<f8", n, off + 8 * n * d).copy()
        return cls(sv, coef, bias, gamma, None if np.isnan(thr) else thr)


def label_map(y):
    """{0, 1} -> {-1, +1}."""
    return 2 * np.asarray(y, dtype=np.int64) - 1


def rbf_kernel(a, b, gamma: float):
    """exp(-gamma |a - b|^2); rows of 2-D inputs are treated as points."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape[-1] != b.shape[-1]:
        raise DimensionMismatch(f"dimension {a.shape[-1]} vs {b.shape[-1]}")
    if a.ndim == 1 and b.ndim == 1:
        diff = a - b
        return float(np.exp(-gamma * diff @ diff))
    a2, b2 = np.atleast_2d(a), np.atleast_2d(b)
    sq = (a2 * a2).sum(1)[:, None] + (b2 * b2).sum(1)[None, :] - 2.0 * a2 @ b2.T
    return np.exp(-gamma * np.maximum(sq, 0.0))


def stratified_subsample(y: np.ndarray, max_size: int, seed: int = 0) -> np.ndarray:
    """Sorted row indices, at most ``max_size``, keeping the class mix.

    The positive count is ``round(max_size * frac_pos)``, so per-class counts
    are within one sample of proportional.
    """
    if max_size < 2:
        raise ValueError("max_size must be >= 2")
    y = np.asarray(y) > 0
    n = len(y)
    pos, neg = np.flatnonzero(y), np.flatnonzero(~y)
    if len(pos) == 0 or len(neg) == 0:
        raise SingleClassTraining("training labels contain a single class")
    if n <= max_size:
        return np.arange(n)
    n_pos = int(round(max_size * len(pos) / n))
    n_pos = min(max(n_pos, 1), max_size - 1)
    rng = np.random.default_rng(seed)
    pick = np.concatenate([rng.choice(pos, n_pos, replace=False),
                           rng.choice(neg, max_size - n_pos, replace=False)])
    return np.sort(pick)


class _KernelRows:
    """LRU cache of kernel matrix rows."""

    def __init__(self, x: np.ndarray, gamma: float, capacity: int):
        self.x = x
        self.gamma = gamma
        self.sq = (x * x).sum(1)
        self.capacity = max(capacity, 2)
        self.rows: OrderedDict[int, np.ndarray] = OrderedDict()
        if len(x) <= capacity:
            self.full = rbf_kernel(x, x, gamma)
        else:
            self.full = None

    def __call__(self, i: int) -> np.ndarray:
        if self.full is not None:
            return self.full[i]
        row = self.rows.get(i)
        if row is not None:
            self.rows.move_to_end(i)
            return row
        sq = self.sq[i] + self.sq - 2.0 * (self.x @ self.x[i])
        row = np.exp(-self.gamma * np.maximum(sq, 0.0))
        self.rows[i] = row
        if len(self.rows) > self.capacity:
            self.rows.popitem(last=False)
        return row


def smo_solve(x: np.ndarray, y: np.ndarray, c_pos: float, c_neg: float, gamma: float,
              tol: float = 1e-3, max_iter: int | None = None, cache_rows: int = 4096):
    """Solve the dual. ``y`` in {-1, +1}. Returns (alpha, bias, iterations, gap)."""
    n = len(y)
    yf = y.astype(np.float64)
    cap = np.where(y > 0, c_pos, c_neg).astype(np.float64)
    alpha = np.zeros(n)
    grad = -np.ones(n)  # Q a - e
    kern = _KernelRows(x, gamma, cache_rows)
    diag = np.ones(n)  # K(x, x) = 1 for RBF
    max_iter = max_iter if max_iter is not None else 100 * n + 10_000

    it = 0
    gap = np.inf
    while it < max_iter:
        # I_up: can move y_i * a_i upward; I_low: downward
        up = ((y > 0) & (alpha < cap)) | ((y < 0) & (alpha > 0))
        low = ((y > 0) & (alpha > 0)) | ((y < 0) & (alpha < cap))
        score = -yf * grad
        up_scores = np.where(up, score, -np.inf)
        i = int(np.argmax(up_scores))
        m_val = up_scores[i]
        low_scores = np.where(low, score, np.inf)
        gap = m_val - low_scores.min()
        if gap < tol:
            break

        k_i = kern(i)
        # second-order choice of j among I_low with score < m
        b = m_val - score
        cand = low & (b > 0)
        a_ij = diag[i] + diag - 2.0 * k_i
        a_ij = np.where(a_ij > 0, a_ij, _TAU)
        gain = np.where(cand, b * b / a_ij, -np.inf)
        j = int(np.argmax(gain))
        k_j = kern(j)

        a = max(diag[i] + diag[j] - 2.0 * k_i[j], _TAU)
        old_i, old_j = alpha[i], alpha[j]
        # move along y_i a_i += t, y_j a_j -= t
        t = (m_val - score[j]) / a
        # box limits for t
        if y[i] > 0:
            t_max_i = cap[i] - old_i
        else:
            t_max_i = old_i
        if y[j] > 0:
            t_max_j = old_j
        else:
            t_max_j = cap[j] - old_j
        t = min(t, t_max_i, t_max_j)
        alpha[i] = old_i + yf[i] * t
        alpha[j] = old_j - yf[j] * t
        # clean tiny negatives / overshoot from rounding
        alpha[i] = min(max(alpha[i], 0.0), cap[i])
        alpha[j] = min(max(alpha[j], 0.0), cap[j])
        d_i, d_j = alpha[i] - old_i, alpha[j] - old_j
        grad += yf * (yf[i] * d_i * k_i + yf[j] * d_j * k_j)
        it += 1
    else:
        raise NoConvergence(f"SMO did not reach tol={tol} in {max_iter} iterations (gap {gap:.3g})")

    bias = _bias(alpha, grad, yf, cap)
    return alpha, bias, it, float(gap)


def _bias(alpha, grad, yf, cap) -> float:
    """Average of -y_i G_i over free SVs; midpoint of the feasible interval otherwise."""
    free = (alpha > 0) & (alpha < cap)
    r = -yf * grad
    if free.any():
        return float(r[free].mean())
    at_upper = alpha >= cap
    # b must satisfy r_i >= b for some sets and <= b for others
    ub_set = ((yf > 0) & at_upper) | ((yf < 0) & ~at_upper)
    lb_set = ((yf > 0) & ~at_upper) | ((yf < 0) & at_upper)
    ub = r[ub_set].min() if ub_set.any() else np.inf
    lb = r[lb_set].max() if lb_set.any() else -np.inf
    if np.isinf(ub):
        return float(lb)
    if np.isinf(lb):
        return float(ub)
    return float((ub + lb) / 2.0)


def dual_objective(alpha: np.ndarray, x: np.ndarray, y: np.ndarray, gamma: float) -> float:
    """sum(a) - 1/2 a' Q a (to be maximized)."""
    ay = alpha * y
    return float(alpha.sum() - 0.5 * ay @ rbf_kernel(x, x, gamma) @ ay)


def class_penalties(y01: np.ndarray, config: SVMConfig) -> tuple[float, float]:
    n_pos = int(np.count_nonzero(y01))
    n_neg = len(y01) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise SingleClassTraining("training labels contain a single class")
    w_pos = config.class_weight_pos if config.class_weight_pos is not None else n_neg / n_pos
    return config.c * w_pos, config.c * config.class_weight_neg


def svm_fit(x: np.ndarray, y01: np.ndarray, config: SVMConfig = SVMConfig()) -> SVMModel:
    """Fit on (optionally stratified-subsampled) rows; labels in {0, 1}."""
    x = np.asarray(x, dtype=np.float64)
    y01 = np.asarray(y01).ravel()
    idx = stratified_subsample(y01, config.max_train_size, config.seed)
    xs, ys01 = x[idx], y01[idx]
    c_pos, c_neg = class_penalties(ys01, config)
    y = label_map(ys01)
    alpha, bias, it, gap = smo_solve(xs, y, c_pos, c_neg, config.gamma, config.tol,
                                     config.max_passes, config.cache_rows)
    sv = alpha > 0
    log.info("SMO: n=%d iterations=%d n_sv=%d gap=%.2e", len(y), it, int(sv.sum()), gap)
    return SVMModel(xs[sv].copy(), (alpha * y)[sv], bias, config.gamma,
                    info={"iterations": it, "gap": gap, "n_train": len(y), "c_pos": c_pos,
                          "c_neg": c_neg, "alpha": alpha, "train_index": idx})


def svm_decision(model: SVMModel, x: np.ndarray, chunk: int = 4096) -> np.ndarray | float:
    """Signed margin ``sum_i coef_i K(sv_i, x) + b``."""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    x2 = np.atleast_2d(x)
    if x2.shape[1] != model.support_vectors.shape[1]:
        raise DimensionMismatch(f"expected {model.support_vectors.shape[1]} features, got {x2.shape[1]}")
    out = np.empty(len(x2))
    for a in range(0, len(x2), chunk):
        out[a:a + chunk] = rbf_kernel(x2[a:a + chunk], model.support_vectors, model.gamma) @ model.dual_coefs
    out += model.bias
    return float(out[0]) if single else out


def kkt_violations(alpha: np.ndarray, x: np.ndarray, y: np.ndarray, bias: float, gamma: float,
                   c_pos: float, c_neg: float, tol: float = 1e-3) -> np.ndarray:
    """Indices of training points whose margin breaks the KKT conditions by more than ``tol``."""
    cap = np.where(y > 0, c_pos, c_neg)
    f = rbf_kernel(x, x, gamma) @ (alpha * y) + bias
    m = y * f
    eps = 1e-12 * cap
    zero = alpha <= eps
    at_cap = alpha >= cap - eps
    free = ~zero & ~at_cap
    bad = (zero & (m < 1 - tol)) | (free & (np.abs(m - 1) > tol)) | (at_cap & (m > 1 + tol))
    return np.flatnonzero(bad)
