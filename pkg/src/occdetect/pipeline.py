"""Train / calibrate / evaluate orchestration shared by the CLI and the tests."""

from __future__ import annotations

import hashlib
import json
import logging
import time
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Iterable

import numpy as np

from . import __version__
from .errors import UnsupportedModel
from .evalkit import EvalReport, ScoredSet, compute_metrics, f1_at, select_threshold
from .features import FeatureTable, Standardizer, apply_mask, make_windows
from .linmodel import LRModel, lr_fit, lr_predict_proba
from .lstm import LSTMConfig, LSTMModel, lstm_train, predict_proba
from .svm import SVMConfig, SVMModel, svm_decision, svm_fit

log = logging.getLogger(__name__)

MODEL_KINDS = ("lr", "svm", "lstm")

DEFAULT_CONFIGS = {
    "lr": {"l2": 1e-4, "max_iters": 5000, "tol": 1e-6},
    "svm": {"c": 1.0, "gamma": 0.1, "max_train_size": 20000, "tol": 1e-3, "seed": 0},
    "lstm": {"hidden_dim": 16, "num_layers": 1, "seq_len": 30, "dropout": 0.1,
             "learning_rate": 3e-3, "batch_size": 128, "max_epochs": 20, "patience": 4,
             "seed": 0, "train_stride": 10, "val_stride": 5},
}

_ARTIFACT_FILES = {"lr": "model.json", "svm": "model.svm", "lstm": "model.lstm"}


def config_hash(config: dict) -> str:
    return hashlib.sha256(json.dumps(config, sort_keys=True, default=str).encode()).hexdigest()[:16]


def model_config(kind: str, overrides: dict | None = None) -> dict:
    if kind not in MODEL_KINDS:
        raise UnsupportedModel(f"unknown model kind {kind!r}")
    cfg = dict(DEFAULT_CONFIGS[kind])
    cfg.update(overrides or {})
    return cfg


def _dataclass_kwargs(cls, cfg: dict) -> dict:
    names = {f.name for f in fields(cls)}
    return {k: v for k, v in cfg.items() if k in names}


@dataclass
class Trained:
    """A fitted model with everything needed to score new data unchanged."""

    kind: str
    model: LRModel | SVMModel | LSTMModel
    mask: str
    columns: tuple[str, ...]
    standardizer: Standardizer
    config: dict
    threshold: float | None = None
    train_seconds: float = 0.0
    val_f1: float | None = None

    @property
    def best_epoch(self) -> int | None:
        return self.model.best_epoch if self.kind == "lstm" else None

    @property
    def n_params(self) -> int:
        if self.kind == "svm":
            return self.model.support_vectors.size + self.model.dual_coefs.size + 1
        return self.model.n_params


def _masked(table: FeatureTable, kind: str, mask: str) -> FeatureTable:
    if kind not in MODEL_KINDS:
        raise UnsupportedModel(f"unknown model kind {kind!r}")
    return apply_mask(table, mask, kind)


def fit_model(kind: str, table: FeatureTable, config: dict | None = None, mask: str = "all",
              parts: Iterable[str] = ("train",), val_part: str | None = "val",
              fixed_epochs: int | None = None) -> Trained:
    """Fit ``kind`` on the rows of ``parts``; wall-clock time covers the fit only.

    ``val_part`` feeds LSTM early stopping and is ignored by the static models.
    """
    cfg = model_config(kind, config)
    t = _masked(table, kind, mask)
    parts = tuple(parts)
    if kind == "lr":
        x, y = t.xy(parts)
        start = time.perf_counter()
        model = lr_fit(x, y, t.columns, l2=cfg["l2"], max_iters=cfg["max_iters"], tol=cfg["tol"])
        elapsed = time.perf_counter() - start
        model.standardizer = t.standardizer.to_dict()
    elif kind == "svm":
        x, y = t.xy(parts)
        start = time.perf_counter()
        model = svm_fit(x, y, SVMConfig(**_dataclass_kwargs(SVMConfig, cfg)))
        elapsed = time.perf_counter() - start
    else:
        lcfg = LSTMConfig(**_dataclass_kwargs(LSTMConfig, cfg))
        train_w = make_windows(t, lcfg.seq_len, lcfg.train_stride, part=parts)
        val_w = None
        if fixed_epochs is None:
            val_w = make_windows(t, lcfg.seq_len, cfg.get("val_stride", 1), part=val_part)
        start = time.perf_counter()
        model = lstm_train(train_w, val_w, lcfg, fixed_epochs=fixed_epochs, columns=t.columns)
        elapsed = time.perf_counter() - start
    log.info("%s fit on %s in %.2fs", kind, "+".join(parts), elapsed)
    return Trained(kind, model, mask, t.columns, t.standardizer, cfg, train_seconds=elapsed)


def score(trained: Trained, table: FeatureTable, part: str | None = None) -> ScoredSet:
    """Continuous scores on ``part`` (all rows when None), using the trained column set."""
    t = _masked(table, trained.kind, trained.mask)
    if trained.kind == "lstm":
        w = make_windows(t, trained.model.config.seq_len, 1, part=part)
        return ScoredSet(predict_proba(trained.model, w), w.labels)
    x, y = t.xy(part)
    if trained.kind == "lr":
        return ScoredSet(lr_predict_proba(trained.model, x), y)
    return ScoredSet(np.atleast_1d(svm_decision(trained.model, x)), y)


def calibrate(trained: Trained, table: FeatureTable, part: str = "val") -> float:
    val = score(trained, table, part)
    tau = float(select_threshold(val))
    trained.threshold = tau
    trained.val_f1 = float(f1_at(val.scores, val.labels, np.array([tau]))[0])
    trained.model.threshold = tau
    return tau


def evaluate(trained: Trained, table: FeatureTable, part: str | None = "test") -> EvalReport:
    if trained.threshold is None:
        raise ValueError("model has no calibrated threshold")
    return compute_metrics(score(trained, table, part), trained.threshold)


def train_calibrate_evaluate(kind: str, table: FeatureTable, config: dict | None = None,
                             mask: str = "all") -> tuple[Trained, EvalReport]:
    trained = fit_model(kind, table, config, mask)
    calibrate(trained, table)
    return trained, evaluate(trained, table, "test")


def fit_on_parts(kind: str, table: FeatureTable, parts, config: dict, mask: str = "all",
                 threshold: float | None = None, fixed_epochs: int | None = None) -> Trained:
    """Refit on ``parts`` (e.g. train+val) keeping a previously chosen threshold."""
    if kind == "lstm" and fixed_epochs is None:
        raise ValueError("an epoch budget is required to refit the LSTM without validation data")
    trained = fit_model(kind, table, config, mask, parts=parts, val_part=None,
                        fixed_epochs=fixed_epochs if kind == "lstm" else None)
    trained.threshold = threshold
    trained.model.threshold = threshold
    return trained


# ---------------------------------------------------------------------------
# artifacts

def run_meta(seed: int, config: dict, **extra) -> dict:
    return {"seed": seed, "config_hash": config_hash(config), "version": __version__, **extra}


def save_artifact(trained: Trained, directory, meta: dict) -> Path:
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    trained.model.save(out / _ARTIFACT_FILES[trained.kind])
    info = {
        **meta,
        "kind": trained.kind,
        "mask": trained.mask,
        "columns": list(trained.columns),
        "standardizer": trained.standardizer.to_dict(),
        "threshold": trained.threshold,
        "config": trained.config,
        "best_epoch": trained.best_epoch,
        "val_f1": trained.val_f1,
    }
    (out / "meta.json").write_text(json.dumps(info, indent=2, sort_keys=True) + "\n")
    return out


def load_artifact(directory) -> Trained:
    d = Path(directory)
    meta = json.loads((d / "meta.json").read_text())
    kind = meta["kind"]
    cls = {"lr": LRModel, "svm": SVMModel, "lstm": LSTMModel}[kind]
    model = cls.load(d / _ARTIFACT_FILES[kind])
    return Trained(kind, model, meta["mask"], tuple(meta["columns"]),
                   Standardizer.from_dict(meta["standardizer"]), meta["config"],
                   threshold=meta["threshold"], val_f1=meta.get("val_f1"))
