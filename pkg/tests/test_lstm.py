import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from occdetect import autodiff as ad
from occdetect.errors import ShapeMismatch, SingleClassTraining
from occdetect.features import WindowSet
from occdetect.lstm import (LSTMConfig, LSTMModel, grad_check, init_params, lstm_forward,
                            lstm_train, predict_proba, weighted_bce)
from oracles import lstm_forward_loops


def _model(seed, d=3, H=4, layers=1, L=4):
    cfg = LSTMConfig(hidden_dim=H, num_layers=layers, seq_len=L, seed=seed)
    rng = np.random.default_rng(seed)
    p = init_params(d, cfg, rng)
    # randomize everything so layer norm and biases are exercised
    p = {k: v + 0.3 * rng.normal(size=v.shape) for k, v in p.items()}
    return LSTMModel(p, cfg, d)


@pytest.mark.parametrize("seed,layers", [(0, 1), (1, 2), (2, 3)])
def test_forward_matches_loop_oracle(seed, layers):
    m = _model(seed, layers=layers, L=5)
    x = np.random.default_rng(seed + 50).normal(size=(5, 3))
    prob, beta = lstm_forward(m, x.T)
    assert prob == pytest.approx(lstm_forward_loops(m.params, x, layers), abs=1e-12)
    assert beta.shape == (5,)


def test_batch_equals_single():
    m = _model(3)
    x = np.random.default_rng(0).normal(size=(7, 4, 3))
    batch = predict_proba(m, x)
    single = [lstm_forward(m, w.T)[0] for w in x]
    assert np.allclose(batch, single, atol=1e-13)


@pytest.mark.parametrize("seed", range(3))
def test_grad_check(seed):
    m = _model(seed, H=3, L=3, layers=2)
    x = np.random.default_rng(seed).normal(size=(3, 3))
    assert grad_check(m, x, label=seed % 2, pos_weight=1.7) < 1e-4


def test_attention_and_layer_norm_invariants():
    m = _model(4, H=6, L=8)
    rng = np.random.default_rng(1)
    for _ in range(20):
        probe = {}
        lstm_forward(m, rng.normal(size=(3, 8)), probe=probe)
        assert abs(probe["beta"].sum() - 1.0) < 1e-12
        n = probe["normed"][0]
        assert abs(n.mean()) < 1e-8
        var = probe["context"][0].var()
        assert abs(n.var() - var / (var + 1e-5)) < 1e-6


@given(st.lists(st.floats(-30, 30), min_size=2, max_size=12), st.floats(-100, 100))
def test_softmax_shift_invariance(e, c):
    e = np.array([e])
    a = ad.softmax(ad.Tensor(e), axis=1).data
    b = ad.softmax(ad.Tensor(e + c), axis=1).data
    assert np.allclose(a, b, atol=1e-12, rtol=0)
    assert abs(a.sum() - 1) < 1e-12


def test_dropout_only_in_train_mode():
    m = _model(5)
    m = LSTMModel(m.params, LSTMConfig(hidden_dim=4, seq_len=4, dropout=0.5), 3)
    x = np.random.default_rng(2).normal(size=(3, 4))
    assert lstm_forward(m, x)[0] == lstm_forward(m, x)[0]
    a = lstm_forward(m, x, train_mode=True, rng=np.random.default_rng(0))[0]
    b = lstm_forward(m, x, train_mode=True, rng=np.random.default_rng(1))[0]
    assert a != b


def test_shape_errors():
    m = _model(6)
    with pytest.raises(ShapeMismatch):
        lstm_forward(m, np.zeros((2, 4)))
    with pytest.raises(ShapeMismatch):
        predict_proba(m, np.zeros((1, 4, 5)))


def test_weighted_bce_values():
    assert weighted_bce(0.5, 1) == pytest.approx(np.log(2))
    assert weighted_bce(0.5, 1, 3.0) == pytest.approx(3 * np.log(2))
    assert np.isfinite(weighted_bce(0.0, 1)) and np.isfinite(weighted_bce(1.0, 0))


@pytest.mark.parametrize("op", ["mul_bcast", "linear", "getitem", "stack", "power", "mean"])
def test_autodiff_ops(op):
    rng = np.random.default_rng(0)
    a0, b0 = rng.normal(size=(3, 4)), rng.normal(size=(4,))
    w0 = rng.normal(size=(2, 4))

    def f(a, b, w):
        if op == "mul_bcast":
            out = a * b
        elif op == "linear":
            out = ad.linear(a, w, ad.Tensor(np.ones(2)))
        elif op == "getitem":
            out = a[:, 1:3] * a[:, :2]
        elif op == "stack":
            out = ad.stack([a, a * a], axis=1)
        elif op == "power":
            out = ad.power(a * a + 1.0, -0.5)
        else:
            out = ad.mean(ad.tanh(a), axis=1, keepdims=True) * b
        return ad.sum_(ad.sigmoid(out))

    ts = [ad.Tensor(v, requires_grad=True) for v in (a0, b0, w0)]
    f(*ts).backward()
    for k, base in enumerate((a0, b0, w0)):
        num = np.zeros_like(base)
        for i in np.ndindex(base.shape):
            vals = [a0, b0, w0]
            up, dn = base.copy(), base.copy()
            up[i] += 1e-6
            dn[i] -= 1e-6
            vals[k] = up
            fu = f(*map(ad.Tensor, vals)).data
            vals[k] = dn
            fd = f(*map(ad.Tensor, vals)).data
            num[i] = (fu - fd) / 2e-6
        g = ts[k].grad if ts[k].grad is not None else np.zeros_like(base)
        assert np.allclose(g, num, atol=1e-8)


def _toy_windows(n=400, L=6, seed=0):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(n, L, 2))
    y = (x[:, -3:, 0].mean(1) > 0).astype(np.int8)
    return WindowSet.from_arrays(x, y)


def test_training_learns_and_round_trips(tmp_path):
    tr, va = _toy_windows(), _toy_windows(200, seed=1)
    cfg = LSTMConfig(hidden_dim=6, seq_len=6, max_epochs=6, batch_size=32, learning_rate=1e-2, seed=3)
    m = lstm_train(tr, va, cfg)
    assert m.trace[m.best_epoch - 1][2] > 0.85
    assert m.trace[-1][1] < m.trace[0][1]
    m.threshold = 0.42
    m.save(tmp_path / "m.lstm")
    back = LSTMModel.load(tmp_path / "m.lstm")
    assert back.threshold == 0.42 and back.config == cfg and back.best_epoch == m.best_epoch
    assert np.array_equal(predict_proba(back, va), predict_proba(m, va))
    again = lstm_train(tr, va, cfg)
    assert all(np.array_equal(again.params[k], m.params[k]) for k in m.params)


def test_fixed_epochs_and_single_class():
    tr = _toy_windows(100)
    m = lstm_train(tr, None, LSTMConfig(hidden_dim=3, seq_len=6, batch_size=50), fixed_epochs=2)
    assert len(m.trace) == 2 and m.best_epoch == 2
    one = WindowSet.from_arrays(np.zeros((5, 6, 2)), np.ones(5, np.int8))
    with pytest.raises(SingleClassTraining):
        lstm_train(one, None, fixed_epochs=1)


def test_bce_gradient_is_p_minus_y():
    s = ad.Tensor(np.array([-1.3, 0.2, 2.0]), requires_grad=True)
    y = np.array([1.0, 0.0, 1.0])
    ad.bce_with_logits(s, y).backward()
    p = 1 / (1 + np.exp(-s.data))
    assert np.allclose(s.grad, (p - y) / 3, atol=1e-15)  # mean over the batch


def test_layer_norm_subgraph_gradient():
    rng = np.random.default_rng(0)
    c0, g0, b0 = rng.normal(size=(2, 5)), rng.normal(size=5), rng.normal(size=5)
    r = rng.normal(size=(2, 5))

    def f(c, g, b):
        mu = ad.mean(c, axis=1, keepdims=True)
        cen = c - mu
        var = ad.mean(cen * cen, axis=1, keepdims=True)
        return ad.sum_((cen * ad.power(var + 1e-5, -0.5) * g + b) * ad.Tensor(r))

    ts = [ad.Tensor(v, requires_grad=True) for v in (c0, g0, b0)]
    f(*ts).backward()
    for k, base in enumerate((c0, g0, b0)):
        num = np.zeros_like(base)
        for i in np.ndindex(base.shape):
            vals = [c0, g0, b0]
            up, dn = base.copy(), base.copy()
            up[i] += 1e-6
            dn[i] -= 1e-6
            vals[k] = up
            fu = f(*map(ad.Tensor, vals)).data
            vals[k] = dn
            num[i] = (fu - f(*map(ad.Tensor, vals)).data) / 2e-6
        rel = np.abs(ts[k].grad - num) / np.maximum(np.abs(num), 1e-6)
        assert rel.max() < 1e-5


def test_grad_check_per_group():
    m = _model(9, H=3, L=3)
    errs = grad_check(m, np.random.default_rng(1).normal(size=(3, 3)), 1,
                      groups=("lstm", "attn", "ln", "head"))
    assert set(errs) == {"lstm", "attn", "ln", "head"}
    assert max(errs.values()) < 1e-4


def test_same_seed_same_trace():
    tr, va = _toy_windows(200), _toy_windows(100, seed=1)
    cfg = LSTMConfig(hidden_dim=3, seq_len=6, max_epochs=3, batch_size=64, seed=2)
    assert lstm_train(tr, va, cfg).trace == lstm_train(tr, va, cfg).trace
