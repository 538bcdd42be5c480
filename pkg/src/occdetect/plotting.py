"""Figures written next to the CSV/JSON outputs (non-interactive backend)."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

_SAVE = {"dpi": 120, "bbox_inches": "tight", "metadata": {"Software": None}}


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, **_SAVE)
    plt.close(fig)
    return path


def confusion(matrix, path, title: str = "") -> Path:
    """Row-normalized confusion matrix with raw counts in each cell."""
    m = np.asarray(matrix, dtype=np.float64)
    rows = m.sum(axis=1, keepdims=True)
    norm = np.divide(m, rows, out=np.zeros_like(m), where=rows > 0)
    fig, ax = plt.subplots(figsize=(3.6, 3.2))
    ax.imshow(norm, vmin=0, vmax=1, cmap="Blues")
    for i in range(2):
        for j in range(2):
            ax.text(j, i, f"{norm[i, j]:.2f}\n({int(m[i, j])})", ha="center", va="center",
                    color="white" if norm[i, j] > 0.5 else "black", fontsize=9)
    ax.set_xticks([0, 1], ["vacant", "occupied"])
    ax.set_yticks([0, 1], ["vacant", "occupied"])
    ax.set_xlabel("predicted")
    ax.set_ylabel("true")
    if title:
        ax.set_title(title, fontsize=10)
    return _save(fig, path)


def ablation_bars(rows: Sequence[dict], path, metric: str = "f1") -> Path:
    """Grouped bars: one group per model, one bar per feature mask."""
    models = list(dict.fromkeys(r["model"] for r in rows))
    masks = list(dict.fromkeys(r["mask"] for r in rows))
    width = 0.8 / max(len(masks), 1)
    fig, ax = plt.subplots(figsize=(5.5, 3.2))
    for k, mask in enumerate(masks):
        vals = [next((r[metric] for r in rows if r["model"] == m and r["mask"] == mask), np.nan)
                for m in models]
        ax.bar(np.arange(len(models)) + (k - (len(masks) - 1) / 2) * width, vals, width, label=mask)
    ax.set_xticks(range(len(models)), [m.upper() for m in models])
    ax.set_ylabel(metric.upper() if metric == "f1" else metric)
    ax.set_ylim(0, 1)
    ax.legend(fontsize=8, loc="lower right")
    return _save(fig, path)


def bo_trace(objectives: Sequence[float], path, n_init: int | None = None) -> Path:
    y = np.asarray(objectives, dtype=np.float64)
    fig, ax = plt.subplots(figsize=(5, 3))
    ax.plot(np.arange(1, len(y) + 1), y, "o", ms=4, label="evaluation")
    ax.plot(np.arange(1, len(y) + 1), np.maximum.accumulate(y), "-", label="best so far")
    if n_init:
        ax.axvline(n_init + 0.5, color="grey", lw=0.8, ls="--")
    ax.set_xlabel("evaluation")
    ax.set_ylabel("validation F1")
    ax.legend(fontsize=8)
    return _save(fig, path)


def duration_histogram(durations_min: np.ndarray, path, bin_minutes: float = 15.0,
                       max_minutes: float = 360.0) -> Path:
    d = np.asarray(durations_min, dtype=np.float64)
    bins = np.arange(0, max_minutes + bin_minutes, bin_minutes)
    fig, ax = plt.subplots(figsize=(5, 3))
    ax.hist(np.minimum(d, max_minutes - 1e-9), bins=bins, color="tab:blue", edgecolor="white")
    ax.set_xlabel("occupied duration (min)")
    ax.set_ylabel("count")
    return _save(fig, path)


def occupancy_boxplots(series, path) -> Path:
    """Per-channel distributions split by the occupancy label."""
    occ = np.asarray(series.occupied) == 1
    chans = (("co2", "CO2 (ppm)"), ("t_indoor", "T (C)"), ("rh", "RH (%)"))
    fig, axes = plt.subplots(1, 3, figsize=(8, 3))
    for ax, (name, label) in zip(axes, chans):
        v = np.asarray(getattr(series, name))
        ax.boxplot([v[~occ], v[occ]], showfliers=False)
        ax.set_xticks([1, 2], ["vacant", "occupied"])
        ax.set_title(label, fontsize=9)
    fig.tight_layout()
    return _save(fig, path)


def training_curves(trace, path) -> Path:
    """LSTM loss and validation AUC per epoch."""
    t = np.asarray(trace, dtype=np.float64)
    fig, ax = plt.subplots(figsize=(5, 3))
    ax.plot(t[:, 0], t[:, 1], "-o", ms=3, label="train loss")
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    if np.isfinite(t[:, 2]).any():
        ax2 = ax.twinx()
        ax2.plot(t[:, 0], t[:, 2], "-s", ms=3, color="tab:orange", label="val AUC")
        ax2.set_ylabel("val AUC")
    return _save(fig, path)
