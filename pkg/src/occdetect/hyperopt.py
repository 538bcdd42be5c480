"""Bayesian optimization with a Matern-5/2 GP surrogate and expected improvement."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy.linalg import cho_solve, cholesky, solve_triangular
from scipy.stats import norm, qmc

from .errors import IllConditionedKernel, ObjectiveFailure

log = logging.getLogger(__name__)

NOISE_FLOOR = 1e-6
N_CANDIDATES = 4096
N_LOCAL = 512
LENGTH_GRID = np.geomspace(0.03, 3.0, 15)


# ---------------------------------------------------------------------------
# search space

@dataclass(frozen=True)
class Dim:
    name: str
    lower: float
    upper: float
    scale: str = "linear"  # or "log"
    kind: str = "continuous"  # or "integer"

    def __post_init__(self):
        if not self.lower < self.upper:
            raise ValueError(f"{self.name}: lower must be < upper")
        if self.scale == "log" and self.lower <= 0:
            raise ValueError(f"{self.name}: log scale needs lower > 0")
        if self.scale not in ("linear", "log") or self.kind not in ("continuous", "integer"):
            raise ValueError(f"{self.name}: bad scale/kind")

    def from_unit(self, u: float) -> float:
        u = min(max(float(u), 0.0), 1.0)
        if self.scale == "log":
            v = math.exp(math.log(self.lower) + u * (math.log(self.upper) - math.log(self.lower)))
        else:
            v = self.lower + u * (self.upper - self.lower)
        v = min(max(v, self.lower), self.upper)
        return int(round(v)) if self.kind == "integer" else v

    def to_unit(self, v: float) -> float:
        if self.scale == "log":
            return (math.log(v) - math.log(self.lower)) / (math.log(self.upper) - math.log(self.lower))
        return (v - self.lower) / (self.upper - self.lower)


@dataclass(frozen=True)
class SearchSpace:
    dims: tuple[Dim, ...]

    @property
    def names(self) -> list[str]:
        return [d.name for d in self.dims]

    def __len__(self):
        return len(self.dims)

    def from_unit(self, u: np.ndarray) -> dict:
        return {d.name: d.from_unit(x) for d, x in zip(self.dims, u)}

    def to_unit(self, params: dict) -> np.ndarray:
        return np.array([d.to_unit(params[d.name]) for d in self.dims])

    def contains(self, params: dict) -> bool:
        for d in self.dims:
            v = params[d.name]
            if not d.lower <= v <= d.upper:
                return False
            if d.kind == "integer" and v != int(v):
                return False
        return True


SVM_SPACE = SearchSpace((
    Dim("c", 1e-2, 1e3, "log"),
    Dim("gamma", 1e-4, 1e1, "log"),
))

LSTM_SPACE = SearchSpace((
    Dim("hidden_dim", 8, 128, "log", "integer"),
    Dim("num_layers", 1, 3, "linear", "integer"),
    Dim("seq_len", 10, 240, "linear", "integer"),
    Dim("dropout", 0.05, 0.5),
    Dim("learning_rate", 1e-4, 1e-2, "log"),
))


# ---------------------------------------------------------------------------
# Gaussian process

@dataclass
class GPParams:
    length_scales: np.ndarray
    amplitude: float = 1.0  # prior standard deviation
    mean: float = 0.0  # constant prior mean
    noise: float = NOISE_FLOOR  # diagonal noise, relative to amplitude**2

    def to_dict(self) -> dict:
        return {"length_scales": np.asarray(self.length_scales).tolist(), "amplitude": self.amplitude,
                "mean": self.mean, "noise": self.noise}


def matern52(a: np.ndarray, b: np.ndarray, length_scales, amplitude: float = 1.0) -> np.ndarray:
    a = np.atleast_2d(a) / length_scales
    b = np.atleast_2d(b) / length_scales
    sq = (a * a).sum(1)[:, None] + (b * b).sum(1)[None, :] - 2.0 * a @ b.T
    r = np.sqrt(np.maximum(sq, 0.0))
    s5r = math.sqrt(5.0) * r
    return amplitude ** 2 * (1.0 + s5r + 5.0 / 3.0 * r * r) * np.exp(-s5r)


def _chol(k: np.ndarray, base: float) -> tuple[np.ndarray, float]:
    """Cholesky factor with jitter escalation from ``base`` up to 1e-2 of the diagonal scale."""
    scale = float(np.mean(np.diag(k))) or 1.0
    jitter = 0.0
    for _ in range(8):
        try:
            return cholesky(k + (base + jitter) * np.eye(len(k)), lower=True), jitter
        except np.linalg.LinAlgError:
            jitter = scale * 1e-8 if jitter == 0.0 else jitter * 10.0
    raise IllConditionedKernel(f"kernel matrix not positive definite even with jitter {jitter:.1e}")


def gp_posterior(x_obs: np.ndarray, y_obs: np.ndarray, x_query: np.ndarray,
                 params: GPParams) -> tuple[np.ndarray, np.ndarray]:
    """Exact GP posterior mean and standard deviation at ``x_query``."""
    x_obs = np.atleast_2d(np.asarray(x_obs, dtype=np.float64))
    y_obs = np.asarray(y_obs, dtype=np.float64).ravel()
    xq = np.atleast_2d(np.asarray(x_query, dtype=np.float64))
    if len(x_obs) == 0:
        raise ValueError("need at least one observation")
    amp2 = params.amplitude ** 2
    k = matern52(x_obs, x_obs, params.length_scales, params.amplitude)
    lower, _ = _chol(k, max(params.noise, NOISE_FLOOR) * amp2)
    ks = matern52(x_obs, xq, params.length_scales, params.amplitude)
    alpha = cho_solve((lower, True), y_obs - params.mean)
    mean = params.mean + ks.T @ alpha
    v = solve_triangular(lower, ks, lower=True)
    var = np.maximum(amp2 - (v * v).sum(0), 0.0)
    return mean, np.sqrt(var)


def log_marginal_likelihood(x_obs, y_obs, params: GPParams) -> float:
    amp2 = params.amplitude ** 2
    k = matern52(x_obs, x_obs, params.length_scales, params.amplitude)
    try:
        lower, _ = _chol(k, max(params.noise, NOISE_FLOOR) * amp2)
    except IllConditionedKernel:
        return -np.inf
    r = np.asarray(y_obs) - params.mean
    alpha = cho_solve((lower, True), r)
    return float(-0.5 * r @ alpha - np.log(np.diag(lower)).sum() - 0.5 * len(r) * math.log(2 * math.pi))


def fit_gp(x_obs: np.ndarray, y_obs: np.ndarray) -> GPParams:
    """Prior mean/amplitude from the data; length scales by marginal-likelihood grid search.

    An isotropic scan picks the starting scale, then two coordinate sweeps
    adjust each dimension over the same grid.
    """
    y = np.asarray(y_obs, dtype=np.float64)
    mean = float(y.mean())
    amp = float(y.std())
    if not amp > 1e-12:
        amp = 1.0
    d = x_obs.shape[1]
    best = None
    for ell in LENGTH_GRID:
        p = GPParams(np.full(d, ell), amp, mean)
        lml = log_marginal_likelihood(x_obs, y, p)
        if best is None or lml > best[0]:
            best = (lml, p)
    lml, p = best
    scales = p.length_scales.copy()
    for _ in range(2 if d > 1 else 0):
        for j in range(d):
            for ell in LENGTH_GRID:
                trial = scales.copy()
                trial[j] = ell
                cand = log_marginal_likelihood(x_obs, y, GPParams(trial, amp, mean))
                if cand > lml:
                    lml, scales = cand, trial
    return GPParams(scales, amp, mean)


def expected_improvement(mean, std, best_so_far: float):
    """EI for maximization; reduces to max(mean - best, 0) where std = 0."""
    mu = np.asarray(mean, dtype=np.float64)
    sd = np.asarray(std, dtype=np.float64)
    imp = mu - best_so_far
    with np.errstate(divide="ignore", invalid="ignore"):
        z = np.where(sd > 0, imp / np.where(sd > 0, sd, 1.0), 0.0)
        ei = np.where(sd > 0, imp * norm.cdf(z) + sd * norm.pdf(z), np.maximum(imp, 0.0))
    ei = np.maximum(ei, 0.0)
    return float(ei) if ei.ndim == 0 else ei


# ---------------------------------------------------------------------------
# optimization loop

@dataclass
class BOTrace:
    space: SearchSpace
    evaluations: list[dict] = field(default_factory=list)
    surrogate: dict | None = None

    @property
    def best(self) -> dict:
        return max(self.evaluations, key=lambda e: e["objective"])

    @property
    def best_params(self) -> dict:
        return self.best["params"]

    @property
    def best_objective(self) -> float:
        return self.best["objective"]

    def running_best(self) -> list[float]:
        out, cur = [], -np.inf
        for e in self.evaluations:
            cur = max(cur, e["objective"])
            out.append(cur)
        return out

    def write_jsonl(self, path) -> None:
        with open(path, "w") as fh:
            for e in self.evaluations:
                fh.write(json.dumps(e, sort_keys=True) + "\n")

    @staticmethod
    def read_jsonl(path) -> list[dict]:
        p = Path(path)
        if not p.exists():
            return []
        return [json.loads(line) for line in p.read_text().splitlines() if line.strip()]


def _call(objective, params: dict):
    try:
        result = objective(params)
    except Exception as exc:  # propagate with the offending point
        raise ObjectiveFailure(params, exc) from exc
    if isinstance(result, tuple):
        value, info = result
    else:
        value, info = result, {}
    return float(value), dict(info)


def propose(x_obs: np.ndarray, y_obs: np.ndarray, rng: np.random.Generator,
            n_candidates: int = N_CANDIDATES, n_local: int = N_LOCAL) -> tuple[np.ndarray, GPParams, float]:
    """Unit-cube point maximizing EI over random and incumbent-local candidates."""
    gp = fit_gp(x_obs, y_obs)
    d = x_obs.shape[1]
    incumbent = x_obs[int(np.argmax(y_obs))]
    cand = np.vstack([
        rng.random((n_candidates, d)),
        np.clip(incumbent + rng.normal(0.0, 0.05, (n_local, d)), 0.0, 1.0),
    ])
    mu, sd = gp_posterior(x_obs, y_obs, cand, gp)
    ei = expected_improvement(mu, sd, float(np.max(y_obs)))
    k = int(np.argmax(ei))
    return cand[k], gp, float(ei[k])


def bo_optimize(objective: Callable[[dict], float | tuple], space: SearchSpace, n_init: int = 5,
                n_iters: int = 20, seed: int = 0, resume: Sequence[dict] = (),
                on_evaluation: Callable[[dict], None] | None = None) -> BOTrace:
    """Maximize ``objective`` over ``space``.

    ``n_init`` Latin-hypercube points are followed by ``n_iters`` EI proposals.
    Evaluations in ``resume`` (as stored in a trace file) are reused in order
    instead of being recomputed; the random streams are keyed by evaluation
    index so a resumed run proposes the same points as an uninterrupted one.
    """
    if n_init < 2 or n_iters < 0:
        raise ValueError("need n_init >= 2 and n_iters >= 0")
    d = len(space)
    lhs = qmc.LatinHypercube(d=d, seed=np.random.default_rng([seed, 0])).random(n_init)
    trace = BOTrace(space)
    xs: list[np.ndarray] = []
    ys: list[float] = []
    for j in range(n_init + n_iters):
        if j < len(resume):
            entry = resume[j]
            trace.evaluations.append(entry)
            xs.append(space.to_unit(entry["params"]))
            ys.append(entry["objective"])
            continue
        surrogate = None
        if j < n_init:
            params = space.from_unit(lhs[j])
        else:
            rng = np.random.default_rng([seed, 1, j])
            u, gp, ei = propose(np.array(xs), np.array(ys), rng)
            params = space.from_unit(u)
            surrogate = {**gp.to_dict(), "ei": ei}
        value, info = _call(objective, params)
        entry = {"index": j, "params": params, "objective": value, "info": info,
                 "phase": "init" if j < n_init else "ei"}
        if surrogate is not None:
            entry["surrogate"] = surrogate
            trace.surrogate = surrogate
        trace.evaluations.append(entry)
        xs.append(space.to_unit(params))
        ys.append(value)
        log.info("BO %d/%d %s -> %.4f", j + 1, n_init + n_iters, params, value)
        if on_evaluation is not None:
            on_evaluation(entry)
    return trace


def final_retrain(best_params: dict, table, kind: str, base_config: dict | None = None,
                  threshold: float | None = None, best_epoch: int | None = None, mask="all"):
    """Refit ``kind`` with ``best_params`` on train+val rows.

    The decision threshold found during tuning is kept fixed. For the LSTM the
    epoch budget is the best epoch of the tuning run since no validation set
    is left for early stopping.
    """
    from .pipeline import fit_on_parts

    return fit_on_parts(kind, table, ("train", "val"), {**(base_config or {}), **best_params},
                        mask=mask, threshold=threshold, fixed_epochs=best_epoch)
