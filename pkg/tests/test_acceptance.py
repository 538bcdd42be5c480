"""Acceptance criteria 1-12, each at its stated tolerance.

Every test records a one-line verdict in ``conftest.ACCEPTANCE``; the summary
is printed at the end of the pytest run. The end-to-end criteria (8-11) share
one module-scoped run on ten simulated months of the reference apartment.
"""

import filecmp
import math
import time
from pathlib import Path

import numpy as np
import pytest

import conftest
from occdetect import autodiff as ad
from occdetect.cli import main
from occdetect.evalkit import ScoredSet, roc_auc, select_threshold
from occdetect.features import build_table
from occdetect.hyperopt import Dim, GPParams, SearchSpace, bo_optimize, expected_improvement, gp_posterior
from occdetect.linmodel import loss_and_grad
from occdetect.lstm import LN_EPS, LSTMConfig, LSTMModel, grad_check, init_params, lstm_forward
from occdetect.pipeline import evaluate, train_calibrate_evaluate
from occdetect.svm import SVMConfig, class_penalties, kkt_violations, label_map, svm_fit
from occdetect.synthgen import (ApartmentParams, SchedulerParams, SeasonProfile, gen_schedule,
                                make_scenarios, occupied_durations, simulate)
from oracles import (best_f1_sweep, dual_objective, f1_counts, f1_within_ranks, gp_dense,
                     pairwise_auc, qp_dual_oracle, rbf_gram)

MASKS = ("all", "no-rh-t", "no-co2")
KINDS = ("lr", "svm", "lstm")


def record(k, ok, detail):
    conftest.ACCEPTANCE[k] = (bool(ok), detail)
    print(f"criterion {k}: {'PASS' if ok else 'FAIL'}  {detail}")
    assert ok, detail


# ---------------------------------------------------------------------------

def test_c01_svm_oracle():
    rng = np.random.default_rng(2024)
    start = time.perf_counter()
    worst_gap, kkt_bad = 0.0, 0
    for _ in range(20):
        n, d = int(rng.integers(10, 51)), int(rng.integers(2, 9))
        x = rng.normal(size=(n, d))
        y01 = (x[:, 0] + 0.7 * rng.normal(size=n) > 0).astype(int)
        y01[:2] = (0, 1)
        cfg = SVMConfig(c=float(rng.uniform(0.3, 10)), gamma=float(rng.uniform(0.05, 1.0)), tol=1e-6)
        m = svm_fit(x, y01, cfg)
        y = label_map(y01)
        alpha = m.info["alpha"]
        c_pos, c_neg = class_penalties(y01, cfg)
        K = rbf_gram(x, cfg.gamma)
        _, best = qp_dual_oracle(K, y.astype(float), np.where(y > 0, c_pos, c_neg))
        worst_gap = max(worst_gap, abs(dual_objective(alpha, K, y) - best))
        kkt_bad += len(kkt_violations(alpha, x, y, m.bias, cfg.gamma, c_pos, c_neg, 1e-3))
    elapsed = time.perf_counter() - start
    record(1, worst_gap <= 1e-6 and kkt_bad == 0 and elapsed < 60,
           f"20 problems: max |dual - oracle| {worst_gap:.2e}, KKT violations {kkt_bad}, {elapsed:.1f}s")


def _lr_rel_error(rng):
    n = int(rng.integers(20, 120))
    cont = rng.normal(size=(n, 4))
    season = np.eye(4)[rng.integers(0, 4, n)]
    y = rng.integers(0, 2, n).astype(float)
    w = np.where(y > 0, rng.uniform(0.5, 3), 1.0)
    theta = rng.normal(size=8)
    l2 = float(rng.uniform(0, 0.1))
    _, g = loss_and_grad(theta, season, cont, y, w, l2)
    num = np.empty(8)
    for k in range(8):
        e = np.zeros(8)
        e[k] = 1e-6
        num[k] = (loss_and_grad(theta + e, season, cont, y, w, l2)[0]
                  - loss_and_grad(theta - e, season, cont, y, w, l2)[0]) / 2e-6
    return float(np.max(np.abs(g - num) / np.maximum(np.maximum(np.abs(g), np.abs(num)), 1e-6)))


def test_c02_gradients():
    start = time.perf_counter()
    lstm_worst, lr_worst = 0.0, 0.0
    for seed in range(50):
        rng = np.random.default_rng(seed)
        H, L, d = int(rng.integers(1, 5)), int(rng.integers(1, 5)), int(rng.integers(1, 5))
        cfg = LSTMConfig(hidden_dim=H, seq_len=L, num_layers=int(rng.integers(1, 3)), seed=seed)
        params = {k: v + 0.2 * rng.normal(size=v.shape) for k, v in init_params(d, cfg, rng).items()}
        model = LSTMModel(params, cfg, d)
        err = grad_check(model, rng.normal(size=(d, L)), int(rng.integers(0, 2)),
                         pos_weight=float(rng.uniform(0.5, 3)))
        lstm_worst = max(lstm_worst, err)
        lr_worst = max(lr_worst, _lr_rel_error(rng))
    elapsed = time.perf_counter() - start
    record(2, lstm_worst < 1e-4 and lr_worst < 1e-5 and elapsed < 120,
           f"50 seeds: LSTM max rel err {lstm_worst:.2e}, LR {lr_worst:.2e}, {elapsed:.1f}s")


def test_c03_attention_and_norm():
    rng = np.random.default_rng(7)
    beta_err = shift_err = mean_err = var_err = var_from_one = 0.0
    for k in range(1000):
        H, L, d = int(rng.integers(2, 9)), int(rng.integers(1, 13)), int(rng.integers(1, 5))
        cfg = LSTMConfig(hidden_dim=H, seq_len=L, num_layers=1 + k % 2)
        params = {n: v + 0.3 * rng.normal(size=v.shape) for n, v in init_params(d, cfg, rng).items()}
        probe = {}
        lstm_forward(LSTMModel(params, cfg, d), rng.normal(size=(d, L)) * 2, probe=probe)
        beta, e = probe["beta"][0], probe["scores"]
        beta_err = max(beta_err, abs(beta.sum() - 1.0))
        shifted = ad.softmax(ad.Tensor(e + rng.uniform(-50, 50)), axis=1).data[0]
        shift_err = max(shift_err, float(np.max(np.abs(shifted - beta))))
        normed, ctx = probe["normed"][0], probe["context"][0]
        mean_err = max(mean_err, abs(normed.mean()))
        v = ctx.var()
        var_err = max(var_err, abs(normed.var() - v / (v + LN_EPS)))
        var_from_one = max(var_from_one, abs(normed.var() - 1.0))
    ok = beta_err < 1e-12 and shift_err < 1e-12 and mean_err < 1e-8 and var_err < 1e-6
    record(3, ok, f"1000 forwards: |sum beta - 1| {beta_err:.1e}, shift {shift_err:.1e}, "
                  f"LN mean {mean_err:.1e}, LN var error {var_err:.1e} "
                  f"(|var - 1| {var_from_one:.1e} incl. eps={LN_EPS:g})")


def test_c04_threshold_optimality():
    rng = np.random.default_rng(11)
    worst_shortfall, worst_margin, exact = 0.0, np.inf, 0
    for _ in range(100):
        y = (rng.random(500) < rng.uniform(0.2, 0.8)).astype(int)
        s = np.round(rng.normal(size=500) + rng.uniform(0.3, 2.5) * y, int(rng.integers(1, 4)))
        tau = select_threshold(ScoredSet(s, y))
        got = f1_counts(s >= tau, y)
        best = best_f1_sweep(s, y)
        # grid resolution: 0.5 percentile steps span at most 4 sorted positions here
        best_r, floor = f1_within_ranks(s, y, 4)
        assert best_r == pytest.approx(best, abs=1e-15)
        worst_shortfall = max(worst_shortfall, best - got)
        worst_margin = min(worst_margin, got - floor)
        exact += got == best
    record(4, worst_margin >= -1e-12 and worst_shortfall >= -1e-12,
           f"100 sets of 500: max F1 shortfall vs sweep {worst_shortfall:.4f} "
           f"(within grid resolution on all; exact on {exact})")


def test_c05_auc():
    rng = np.random.default_rng(5)
    err = inv = 0.0
    for _ in range(20):
        y = rng.integers(0, 2, 200)
        s = rng.integers(0, 25, 200) / 10.0 + 0.5 * y  # many ties
        a = roc_auc(s, y)
        err = max(err, abs(a - pairwise_auc(s, y)))
        inv = max(inv, abs(roc_auc(np.exp(s), y) - a), abs(roc_auc(2.5 * s - 7, y) - a))
    record(5, err <= 1e-12 and inv <= 1e-12,
           f"n=200 with ties: max |rank - pairwise| {err:.1e}, transform drift {inv:.1e}")


def test_c06_gp_ei_bo():
    rng = np.random.default_rng(6)
    gp_err = 0.0
    for _ in range(10):
        d = int(rng.integers(1, 4))
        x, xq = rng.random((15, d)), rng.random((40, d))
        y = np.sin(5 * x).sum(1)
        p = GPParams(rng.uniform(0.1, 1.0, d), float(rng.uniform(0.5, 2)), float(y.mean()), 1e-6)
        mu, sd = gp_posterior(x, y, xq, p)
        mu_o, sd_o = gp_dense(x, y, xq, p.length_scales, p.amplitude, p.mean, p.noise)
        gp_err = max(gp_err, float(np.max(np.abs(mu - mu_o))), float(np.max(np.abs(sd - sd_o))))
    ei0 = max(expected_improvement(m, 0.0, 0.0) for m in (-1.0, -1e-3, 0.0))
    ei1 = expected_improvement(0.0, 1.0, 0.0)
    space = SearchSpace((Dim("x", 0.0, 1.0),))
    hits = sum(abs(bo_optimize(lambda q: -(q["x"] - 0.3) ** 2, space, 4, 12, seed=s)
                   .best_params["x"] - 0.3) <= 0.05 for s in range(20))
    ok = gp_err <= 1e-8 and ei0 == 0.0 and abs(ei1 - 0.39894) <= 1e-4 and hits >= 18
    record(6, ok, f"GP vs dense {gp_err:.1e}; EI(sigma=0) {ei0}; EI(0,1) {ei1:.5f}; "
                  f"BO within 0.05 in {hits}/20")


def test_c07_synthetic_physics():
    apt = ApartmentParams(noise_std={"co2": 0.0, "t_indoor": 0.0, "rh": 0.0}, rh_drift_std=0.0,
                          activity_spread=0.0)
    s = simulate(np.ones(4 * 2880, np.int8), apt, SeasonProfile.neutral())
    fixed = apt.outdoor_co2 + apt.co2_gen_per_person / (apt.volume * apt.ventilation_rate / 3600)
    err = abs(s.co2[-1] - fixed)
    sched = make_scenarios(seed=0)["scenario0"].scheduler
    dur = occupied_durations(gen_schedule(sched, 365))
    counts, edges = np.histogram(dur, bins=np.arange(0, 361, 15))
    mode = edges[np.argmax(counts)]
    record(7, err <= 1e-9 and mode + 15 <= 60,
           f"steady state error {err:.1e} ppm; duration mode bin [{mode:.0f}, {mode + 15:.0f}) min, "
           f"median {np.median(dur):.0f} min")


# ---------------------------------------------------------------------------
# end to end on the reference apartment

@pytest.fixture(scope="module")
def e2e():
    start = time.perf_counter()
    sc = make_scenarios(seed=0, months=10, split_weights=(6, 2, 2))
    s0 = sc["scenario0"]
    table = build_table(s0.series, s0.split)
    others = {k: build_table(sc[k].series, standardizer=table.standardizer)
              for k in ("scenario1", "scenario2")}
    out = {"f1": {}, "seconds": {}, "transfer": {}}
    for kind in KINDS:
        for mask in MASKS:
            trained, rep = train_calibrate_evaluate(kind, table, None, mask)
            out["f1"][kind, mask] = rep.f1
            if mask == "all":
                out["seconds"][kind] = trained.train_seconds
                out["transfer"][kind] = {k: evaluate(trained, t, None).f1 for k, t in others.items()}
    out["elapsed"] = time.perf_counter() - start
    return out


@pytest.mark.slow
def test_c08_same_apartment(e2e):
    f1 = {k: e2e["f1"][k, "all"] for k in KINDS}
    record(8, all(v >= 0.80 for v in f1.values()),
           "test F1 " + ", ".join(f"{k} {v:.4f}" for k, v in f1.items())
           + f"; full e2e run {e2e['elapsed'] / 60:.1f} min")


@pytest.mark.slow
def test_c09_ablation(e2e):
    parts, ok = [], True
    for k in KINDS:
        a, r, c = (e2e["f1"][k, m] for m in MASKS)
        ok &= c < r < a and (a - c) >= 2 * (a - r)
        parts.append(f"{k} all {a:.4f} no-rh-t {r:.4f} no-co2 {c:.4f}")
    record(9, ok, "; ".join(parts))


@pytest.mark.slow
def test_c10_cross_scenario(e2e):
    tr = e2e["transfer"]
    s1_ok = all(tr[k]["scenario1"] >= 0.70 for k in KINDS)
    drop_ok = all(tr[k]["scenario2"] < e2e["f1"][k, "all"] for k in ("lr", "svm"))
    record(10, s1_ok and drop_ok,
           "; ".join(f"{k} s0 {e2e['f1'][k, 'all']:.4f} s1 {tr[k]['scenario1']:.4f} "
                     f"s2 {tr[k]['scenario2']:.4f}" for k in KINDS))


@pytest.mark.slow
def test_c11_cost_ordering(e2e):
    t = e2e["seconds"]
    record(11, t["lr"] < t["svm"] < t["lstm"],
           f"train seconds lr {t['lr']:.2f}, svm {t['svm']:.2f} ({t['svm'] / t['lr']:.0f}x), "
           f"lstm {t['lstm']:.1f} ({t['lstm'] / t['lr']:.0f}x)")


# ---------------------------------------------------------------------------

def _cli_round(root: Path, cfg: str):
    sim = root / "sim"
    commands = [
        ("simulate", "--out", sim),
        ("train", "--data", sim / "scenario0", "--model", "all", "--out", root / "train"),
        ("tune", "--data", sim / "scenario0", "--model", "svm", "--out", root / "tune"),
        ("ablate", "--data", sim / "scenario0", "--out", root / "ablate"),
        ("generalize", "--data", sim, "--out", root / "generalize"),
        ("evaluate", "--model-dir", root / "train" / "lr" / "model", "--data", sim / "scenario0",
         "--out", root / "evaluate"),
    ]
    for c in commands:
        assert main([str(a) for a in (*c, "--config", cfg, "--seed", 5)]) == 0


def test_c12_determinism(tmp_path, small_config):
    _cli_round(tmp_path / "a", small_config)
    _cli_round(tmp_path / "b", small_config)
    files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*")
                   if p.suffix in (".json", ".jsonl", ".csv") and p.name not in ("timing.json", "table4.csv"))
    differ = [str(p) for p in files if not filecmp.cmp(tmp_path / "a" / p, tmp_path / "b" / p, shallow=False)]
    record(12, len(files) > 20 and not differ,
           f"{len(files)} metric/data files byte-identical across two runs of 6 commands"
           + (f"; differing: {differ}" if differ else ""))
