"""Slow, independent reference computations the library is checked against.

Nothing here imports the code under test.
"""

from __future__ import annotations

import math

import numpy as np


# ---------------------------------------------------------------------------
# SVM dual QP

def dual_objective(alpha, K, y):
    q = (y[:, None] * y[None, :]) * K
    return float(alpha.sum() - 0.5 * alpha @ q @ alpha)


def _project(v, y, cap):
    """Euclidean projection onto {0 <= a <= cap, y.a = 0}.

    r(nu) = y . clip(v - nu y, 0, cap) is piecewise linear and non-increasing,
    so evaluate it at every breakpoint and interpolate on the bracketing piece.
    """
    bps = np.unique(np.concatenate([v * y, (v - cap) * y]))
    r = (np.clip(v[None, :] - bps[:, None] * y[None, :], 0.0, cap) * y).sum(1)
    k = int(np.searchsorted(-r, 0.0))  # first breakpoint with r <= 0
    if k < len(bps) and r[k] == 0.0:
        nu = bps[k]
    else:
        nu = bps[k - 1] + r[k - 1] * (bps[k] - bps[k - 1]) / (r[k - 1] - r[k])
    return np.clip(v - nu * y, 0.0, cap)


def qp_dual_oracle(K, y, cap, iters=5000):
    """Maximize sum(a) - a'Qa/2 over the dual box and hyperplane.

    Accelerated projected gradient, followed by an exact solve of the
    equality-constrained system on the free set it identifies (kept only if
    it is feasible and not worse).
    """
    n = len(y)
    q = (y[:, None] * y[None, :]) * K
    step = 1.0 / np.linalg.eigvalsh(q)[-1]
    a = np.zeros(n)
    z, t = a.copy(), 1.0
    for _ in range(iters):
        a_new = _project(z + step * (1.0 - q @ z), y, cap)
        t_new = 0.5 * (1 + math.sqrt(1 + 4 * t * t))
        z = a_new + (t - 1) / t_new * (a_new - a)
        a, t = a_new, t_new

    tol = 1e-7 * cap.max()
    free = (a > tol) & (a < cap - tol)
    fixed = np.where(a >= cap - tol, cap, 0.0)
    fixed[free] = 0.0
    if free.any():
        f = np.flatnonzero(free)
        m = len(f)
        lhs = np.zeros((m + 1, m + 1))
        lhs[:m, :m] = q[np.ix_(f, f)]
        lhs[:m, m] = y[f]
        lhs[m, :m] = y[f]
        rhs = np.concatenate([1.0 - q[f] @ fixed, [-(y @ fixed)]])
        try:
            sol = np.linalg.solve(lhs, rhs)
            polished = fixed.copy()
            polished[f] = sol[:m]
            ok = np.all(polished >= -1e-12) and np.all(polished <= cap + 1e-12)
            if ok and dual_objective(np.clip(polished, 0, cap), K, y) >= dual_objective(a, K, y):
                a = np.clip(polished, 0, cap)
        except np.linalg.LinAlgError:
            pass
    return a, dual_objective(a, K, y)


def rbf_gram(x, gamma):
    n = len(x)
    K = np.empty((n, n))
    for i in range(n):
        for j in range(n):
            d = x[i] - x[j]
            K[i, j] = math.exp(-gamma * float(d @ d))
    return K


# ---------------------------------------------------------------------------
# metrics

def f1_counts(pred, labels):
    tp = int(np.sum(pred & (labels == 1)))
    fp = int(np.sum(pred & (labels == 0)))
    fn = int(np.sum(~pred & (labels == 1)))
    return 0.0 if tp == 0 else 2 * tp / (2 * tp + fp + fn)


def best_f1_sweep(scores, labels):
    """Max F1 over thresholds at every midpoint of consecutive distinct scores (and both ends)."""
    u = np.unique(scores)
    cands = np.concatenate([[u[0] - 1.0], (u[1:] + u[:-1]) / 2, [u[-1] + 1.0]])
    return max(f1_counts(scores >= c, labels) for c in cands)


def f1_within_ranks(scores, labels, m):
    """(best F1, worst F1 among cuts within ``m`` sorted positions of the best cut).

    A cut at position k predicts the k highest scores as positive; only cuts
    between distinct scores are admissible.
    """
    order = np.argsort(-scores, kind="stable")
    s, y = scores[order], labels[order]
    n, p = len(s), int(labels.sum())
    ks = [k for k in range(n + 1) if k in (0, n) or s[k - 1] != s[k]]
    f1 = {k: (2 * int(y[:k].sum()) / (p + k) if k else 0.0) for k in ks}
    k_best = max(ks, key=lambda k: f1[k])
    near = [f1[k] for k in ks if abs(k - k_best) <= m]
    return f1[k_best], min(near)


def pairwise_auc(scores, labels):
    pos = scores[labels == 1]
    neg = scores[labels == 0]
    total = 0.0
    for p in pos:
        for q in neg:
            total += 1.0 if p > q else (0.5 if p == q else 0.0)
    return total / (len(pos) * len(neg))


# ---------------------------------------------------------------------------
# regression / GP

def ls_slope_normal_equations(t, y):
    A = np.column_stack([np.ones_like(t), t])
    coef = np.linalg.solve(A.T @ A, A.T @ y)
    return coef[1]


def matern52_dense(a, b, ell, amp):
    out = np.empty((len(a), len(b)))
    for i in range(len(a)):
        for j in range(len(b)):
            r = math.sqrt(float(np.sum(((a[i] - b[j]) / ell) ** 2)))
            out[i, j] = amp ** 2 * (1 + math.sqrt(5) * r + 5 * r * r / 3) * math.exp(-math.sqrt(5) * r)
    return out


def gp_dense(x, y, xq, ell, amp, mean, noise):
    K = matern52_dense(x, x, ell, amp) + noise * amp ** 2 * np.eye(len(x))
    ks = matern52_dense(x, xq, ell, amp)
    mu = mean + ks.T @ np.linalg.solve(K, y - mean)
    var = amp ** 2 - np.einsum("ij,ij->j", ks, np.linalg.solve(K, ks))
    return mu, np.sqrt(np.maximum(var, 0.0))


# ---------------------------------------------------------------------------
# LSTM forward, one scalar step at a time

def _sig(z):
    return 1.0 / (1.0 + math.exp(-z))


def lstm_forward_loops(p: dict, x: np.ndarray, num_layers: int, eps: float = 1e-5) -> float:
    """Probability for one window ``x`` (L, d) using plain Python loops."""
    seq = [list(row) for row in x]
    for layer in range(num_layers):
        w_ih, w_hh, b = p[f"lstm{layer}.w_ih"], p[f"lstm{layer}.w_hh"], p[f"lstm{layer}.b"]
        H = w_hh.shape[1]
        h, c = [0.0] * H, [0.0] * H
        out = []
        for xt in seq:
            pre = [b[r] + sum(w_ih[r, k] * xt[k] for k in range(len(xt)))
                   + sum(w_hh[r, k] * h[k] for k in range(H)) for r in range(4 * H)]
            i = [_sig(pre[k]) for k in range(H)]
            f = [_sig(pre[H + k]) for k in range(H)]
            g = [math.tanh(pre[2 * H + k]) for k in range(H)]
            o = [_sig(pre[3 * H + k]) for k in range(H)]
            c = [f[k] * c[k] + i[k] * g[k] for k in range(H)]
            h = [o[k] * math.tanh(c[k]) for k in range(H)]
            out.append(h)
        seq = out
    H = len(seq[0])
    W, v = p["attn.w"], p["attn.v"]
    e = [sum(v[r] * math.tanh(sum(W[r, k] * hk[k] for k in range(H))) for r in range(H)) for hk in seq]
    m = max(e)
    ex = [math.exp(s - m) for s in e]
    beta = [s / sum(ex) for s in ex]
    ctx = [sum(beta[t] * seq[t][k] for t in range(len(seq))) for k in range(H)]
    mu = sum(ctx) / H
    var = sum((ck - mu) ** 2 for ck in ctx) / H
    ln = [p["ln.gain"][k] * (ctx[k] - mu) / math.sqrt(var + eps) + p["ln.bias"][k] for k in range(H)]
    z1 = [max(0.0, p["head.b1"][r] + sum(p["head.w1"][r, k] * ln[k] for k in range(H)))
          for r in range(p["head.w1"].shape[0])]
    z2 = [max(0.0, p["head.b2"][r] + sum(p["head.w2"][r, k] * z1[k] for k in range(len(z1))))
          for r in range(p["head.w2"].shape[0])]
    s = float(p["head.b_out"].ravel()[0]) + sum(p["head.w_out"].ravel()[k] * z2[k] for k in range(len(z2)))
    return _sig(s)
