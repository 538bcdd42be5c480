"""Class-weighted logistic regression with per-season intercepts."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionMismatch, NonFiniteLoss, SingleClassTraining
from .features import SEASON_FEATURES

log = logging.getLogger(__name__)

_Z_CLIP = 30.0


def _split_columns(columns) -> tuple[np.ndarray, np.ndarray]:
    season = np.array([c in SEASON_FEATURES for c in columns])
    return np.flatnonzero(season), np.flatnonzero(~season)


@dataclass
class LRModel:
    """Logit = alpha . season_onehot + beta . continuous."""

    alpha: np.ndarray
    beta: np.ndarray
    columns: tuple[str, ...]
    l2: float = 1e-4
    threshold: float | None = None
    standardizer: dict | None = None
    info: dict = field(default_factory=dict)

    @property
    def n_params(self) -> int:
        return len(self.alpha) + len(self.beta)

    def logit(self, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        if x.shape[1] != len(self.columns):
            raise DimensionMismatch(f"expected {len(self.columns)} features, got {x.shape[1]}")
        s_idx, c_idx = _split_columns(self.columns)
        return x[:, s_idx] @ self.alpha + x[:, c_idx] @ self.beta

    def to_dict(self) -> dict:
        return {
            "alpha": self.alpha.tolist(),
            "beta": self.beta.tolist(),
            "l2": self.l2,
            "threshold": self.threshold,
            "feature_mask": list(self.columns),
            "standardizer": self.standardizer,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "LRModel":
        return cls(np.asarray(d["alpha"], float), np.asarray(d["beta"], float),
                   tuple(d["feature_mask"]), d["l2"], d["threshold"], d.get("standardizer"))

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2)

    @classmethod
    def load(cls, path) -> "LRModel":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def sigmoid(z):
    z = np.clip(z, -_Z_CLIP, _Z_CLIP)
    return 1.0 / (1.0 + np.exp(-z))


def lr_predict_proba(model: LRModel, x: np.ndarray) -> np.ndarray:
    """Occupancy probability, strictly inside (0, 1)."""
    p = sigmoid(model.logit(x))
    return p if np.ndim(x) > 1 else p[0]


def default_class_weights(y: np.ndarray) -> tuple[float, float]:
    """(w_pos, w_neg) = (N_neg / N_pos, 1)."""
    n_pos = int(np.count_nonzero(y))
    n_neg = len(y) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise SingleClassTraining("training labels contain a single class")
    return n_neg / n_pos, 1.0


def loss_and_grad(theta: np.ndarray, x_season: np.ndarray, x_cont: np.ndarray, y: np.ndarray,
                  w: np.ndarray, l2: float) -> tuple[float, np.ndarray]:
    """Weighted mean NLL + (l2/2)|beta|^2 and its gradient wrt [alpha, beta]."""
    k = x_season.shape[1]
    alpha, beta = theta[:k], theta[k:]
    z = x_season @ alpha + x_cont @ beta
    wsum = w.sum()
    nll = np.logaddexp(0.0, z) - y * z
    loss = float(w @ nll / wsum + 0.5 * l2 * beta @ beta)
    r = w * (sigmoid(z) - y) / wsum
    grad = np.concatenate([x_season.T @ r, x_cont.T @ r + l2 * beta])
    return loss, grad


def lr_fit(x: np.ndarray, y: np.ndarray, columns, class_weights: tuple[float, float] | None = None,
           l2: float = 1e-4, max_iters: int = 5000, tol: float = 1e-6, step0: float = 1.0) -> LRModel:
    """Full-batch gradient descent with Armijo backtracking.

    Each trial step starts from the Barzilai-Borwein estimate and is halved
    until the sufficient-decrease condition holds, so the loss never goes up.
    Stops when the gradient infinity norm drops below ``tol``.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64).ravel()
    if x.shape[1] != len(columns):
        raise DimensionMismatch(f"{x.shape[1]} columns but {len(columns)} names")
    w_pos, w_neg = class_weights if class_weights is not None else default_class_weights(y)
    if y.min() == y.max():
        raise SingleClassTraining("training labels contain a single class")
    s_idx, c_idx = _split_columns(columns)
    xs, xc = np.ascontiguousarray(x[:, s_idx]), np.ascontiguousarray(x[:, c_idx])
    w = np.where(y > 0, w_pos, w_neg)

    theta = np.zeros(len(s_idx) + len(c_idx))
    loss, grad = loss_and_grad(theta, xs, xc, y, w, l2)
    step = step0
    history = [loss]
    prev = None
    it = 0
    for it in range(1, max_iters + 1):
        if not np.isfinite(loss):
            raise NonFiniteLoss(f"loss became {loss} at iteration {it}")
        gnorm2 = grad @ grad
        if np.max(np.abs(grad)) < tol:
            break
        if prev is not None:
            s_vec, g_vec = theta - prev[0], grad - prev[1]
            sy = s_vec @ g_vec
            step = sy / (g_vec @ g_vec) if sy > 0 else step0
            step = min(max(step, 1e-8), 1e4)
        while True:
            cand = theta - step * grad
            cand_loss, cand_grad = loss_and_grad(cand, xs, xc, y, w, l2)
            if cand_loss <= loss - 1e-4 * step * gnorm2:
                break
            step *= 0.5
            if step < 1e-16:
                cand, cand_loss, cand_grad = theta, loss, grad
                break
        prev = (theta, grad)
        theta, loss, grad = cand, cand_loss, cand_grad
        history.append(loss)
        if cand is prev[0]:
            log.warning("line search stalled at iteration %d", it)
            break
    else:
        log.warning("lr_fit reached max_iters=%d with |grad|_inf=%.3g", max_iters,
                    float(np.max(np.abs(grad))))

    alpha = theta[:len(s_idx)].copy()
    counts = xs.sum(axis=0)
    seen = counts > 0
    if seen.any() and not seen.all():
        # seasons absent from training fall back to the row-weighted mean intercept
        alpha[~seen] = counts[seen] @ alpha[seen] / counts[seen].sum()
    return LRModel(alpha, theta[len(s_idx):].copy(), tuple(columns), l2,
                   info={"iterations": it, "loss": loss, "loss_history": history,
                         "grad_inf": float(np.max(np.abs(grad))),
                         "class_weights": [w_pos, w_neg]})
