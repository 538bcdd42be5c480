import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from occdetect.errors import DimensionMismatch, SingleClassTraining
from occdetect.features import FEATURE_NAMES
from occdetect.linmodel import (LRModel, default_class_weights, loss_and_grad, lr_fit,
                                lr_predict_proba)


def _data(seed, n=300):
    rng = np.random.default_rng(seed)
    cont = rng.normal(size=(n, 4))
    season = np.eye(4)[rng.integers(0, 4, n)]
    z = 1.5 * cont[:, 0] - 0.5 * cont[:, 3] + season @ np.array([0.3, -0.2, 0.1, 0.0])
    y = (rng.random(n) < 1 / (1 + np.exp(-z))).astype(float)
    return np.hstack([cont, season]), y


def _fd_grad(f, theta, h=1e-6):
    g = np.empty_like(theta)
    for k in range(len(theta)):
        e = np.zeros_like(theta)
        e[k] = h
        g[k] = (f(theta + e) - f(theta - e)) / (2 * h)
    return g


@pytest.mark.parametrize("seed", range(5))
def test_gradient_matches_finite_differences(seed):
    x, y = _data(seed, 80)
    rng = np.random.default_rng(100 + seed)
    theta = rng.normal(size=8)
    w = np.where(y > 0, 1.7, 1.0)
    xs, xc = x[:, 4:], x[:, :4]
    _, g = loss_and_grad(theta, xs, xc, y, w, 1e-2)
    num = _fd_grad(lambda t: loss_and_grad(t, xs, xc, y, w, 1e-2)[0], theta)
    rel = np.abs(g - num) / np.maximum(np.maximum(np.abs(g), np.abs(num)), 1e-6)
    assert rel.max() < 1e-5


def test_loss_monotone_and_stationary():
    x, y = _data(1)
    m = lr_fit(x, y, FEATURE_NAMES, tol=1e-8)
    hist = np.array(m.info["loss_history"])
    assert np.all(np.diff(hist) <= 1e-15)
    assert m.info["grad_inf"] < 1e-8
    assert m.beta[0] > 1.0 and m.beta[3] < 0


def test_weights_and_errors():
    assert default_class_weights(np.array([1, 0, 0, 0])) == (3.0, 1.0)
    with pytest.raises(SingleClassTraining):
        lr_fit(np.zeros((3, 8)), np.ones(3), FEATURE_NAMES)
    with pytest.raises(DimensionMismatch):
        lr_fit(np.zeros((3, 7)), np.array([0, 1, 0]), FEATURE_NAMES)


def test_unseen_season_uses_mean_intercept():
    x, y = _data(2)
    keep = x[:, 7] == 0  # drop autumn
    m = lr_fit(x[keep], y[keep], FEATURE_NAMES)
    counts = x[keep, 4:7].sum(0)
    assert m.alpha[3] == pytest.approx(counts @ m.alpha[:3] / counts.sum())


@given(st.lists(st.floats(-50, 50), min_size=4, max_size=4), st.floats(-1e3, 1e3))
def test_probability_strictly_inside(beta, v):
    m = LRModel(np.zeros(4), np.array(beta), FEATURE_NAMES)
    x = np.concatenate([np.full(4, v), [1, 0, 0, 0]])
    p = lr_predict_proba(m, x)
    assert 0 < p < 1


def test_json_round_trip(tmp_path):
    x, y = _data(3)
    m = lr_fit(x, y, FEATURE_NAMES)
    m.threshold = 0.4
    m.save(tmp_path / "m.json")
    back = LRModel.load(tmp_path / "m.json")
    assert np.array_equal(lr_predict_proba(back, x), lr_predict_proba(m, x))
    assert back.threshold == 0.4 and back.columns == FEATURE_NAMES
