"""Stacked LSTM with global additive attention and a 32/16 ReLU head.

Forward pass for a window ``X`` (L steps, d features)::

    h_1..h_L = LSTM(X)                      last stacked layer, zero init state
    e_k      = v' tanh(W h_k)
    beta     = softmax_k(e)
    c        = sum_k beta_k h_k
    c~       = LayerNorm(c)                 eps = 1e-5, learnable gain/bias
    z1       = relu(W1 c~ + b1)             32 units
    z2       = relu(W2 z1 + b2)             16 units
    p        = sigmoid(w_out' z2 + b_out)

Dropout (inverted) acts on every LSTM layer's output sequence and on z1
during training only.
"""

from __future__ import annotations

import copy
import csv
import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import NonFiniteLoss, ShapeMismatch, SingleClassTraining
from .evalkit import roc_auc
from .features import WindowSet

log = logging.getLogger(__name__)

HEAD_1 = 32
HEAD_2 = 16
LN_EPS = 1e-5


@dataclass(frozen=True)
class LSTMConfig:
    hidden_dim: int = 16
    num_layers: int = 1
    seq_len: int = 30
    dropout: float = 0.1
    learning_rate: float = 3e-3
    batch_size: int = 128
    max_epochs: int = 20
    patience: int = 4
    pos_weight: float | None = None  # None -> N_neg / N_pos on the training windows
    seed: int = 0
    train_stride: int = 10
    grad_clip: float = 5.0
    eval_batch: int = 4096

    def __post_init__(self):
        if self.hidden_dim < 1 or self.num_layers < 1 or self.seq_len < 1:
            raise ValueError("hidden_dim, num_layers and seq_len must be >= 1")
        if not 0.0 < self.dropout < 1.0:
            raise ValueError("dropout must lie in (0, 1)")


def param_shapes(input_dim: int, cfg: LSTMConfig) -> dict[str, tuple[int, ...]]:
    H = cfg.hidden_dim
    shapes = {}
    for layer in range(cfg.num_layers):
        d_in = input_dim if layer == 0 else H
        # gate order: input, forget, candidate, output
        shapes[f"lstm{layer}.w_ih"] = (4 * H, d_in)
        shapes[f"lstm{layer}.w_hh"] = (4 * H, H)
        shapes[f"lstm{layer}.b"] = (4 * H,)
    shapes.update({
        "attn.w": (H, H),
        "attn.v": (H,),
        "ln.gain": (H,),
        "ln.bias": (H,),
        "head.w1": (HEAD_1, H),
        "head.b1": (HEAD_1,),
        "head.w2": (HEAD_2, HEAD_1),
        "head.b2": (HEAD_2,),
        "head.w_out": (HEAD_2,),
        "head.b_out": (1,),
    })
    return shapes


def init_params(input_dim: int, cfg: LSTMConfig, rng: np.random.Generator) -> dict[str, np.ndarray]:
    """Gate weights U(+-1/sqrt(H)) with forget bias +1; dense layers U(+-1/sqrt(fan_in))."""
    H = cfg.hidden_dim
    params = {}
    for name, shape in param_shapes(input_dim, cfg).items():
        if name.startswith("lstm"):
            bound = 1.0 / math.sqrt(H)
            w = rng.uniform(-bound, bound, shape)
            if name.endswith(".b"):
                w[H:2 * H] = 1.0
        elif name == "ln.gain":
            w = np.ones(shape)
        elif name == "ln.bias":
            w = np.zeros(shape)
        else:
            fan_in = shape[-1] if len(shape) == 2 else (H if name == "attn.v" else HEAD_2)
            bound = 1.0 / math.sqrt(fan_in)
            w = rng.uniform(-bound, bound, shape)
        params[name] = w
    return params


@dataclass
class LSTMModel:
    params: dict[str, np.ndarray]
    config: LSTMConfig
    input_dim: int
    threshold: float | None = None
    columns: tuple[str, ...] = ()
    trace: list = field(default_factory=list)
    best_epoch: int = 0
    meta: dict = field(default_factory=dict)

    @property
    def n_params(self) -> int:
        return sum(v.size for v in self.params.values())

    # -- checkpoint ---------------------------------------------------------
    # b"OCCLSTM1", u32 header length, JSON header (config, input_dim, threshold,
    # columns, best_epoch, meta), u32 tensor count, then per tensor:
    # u16 name length, utf-8 name, u8 ndim, ndim*u32 shape, float64 payload.
    _MAGIC = b"OCCLSTM1"

    def save(self, path) -> None:
        header = json.dumps({
            "config": asdict(self.config), "input_dim": self.input_dim,
            "threshold": self.threshold, "columns": list(self.columns),
            "best_epoch": self.best_epoch, "meta": self.meta,
        }, sort_keys=True).encode()
        with open(path, "wb") as fh:
            fh.write(self._MAGIC)
            fh.write(struct.pack("<I", len(header)))
            fh.write(header)
            fh.write(struct.pack("<I", len(self.params)))
            for name, arr in self.params.items():
                raw = name.encode()
                fh.write(struct.pack("<H", len(raw)) + raw)
                fh.write(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
                fh.write(np.ascontiguousarray(arr, "<f8").tobytes())

    @classmethod
    def load(cls, path) -> "LSTMModel":
        buf = Path(path).read_bytes()
        if buf[:8] != cls._MAGIC:
            raise ValueError(f"{path}: not an LSTM checkpoint")
        off = 8
        (n,) = struct.unpack_from("<I", buf, off)
        off += 4
        header = json.loads(buf[off:off + n])
        off += n
        (count,) = struct.unpack_from("<I", buf, off)
        off += 4
        params = {}
        for _ in range(count):
            (ln,) = struct.unpack_from("<H", buf, off)
            off += 2
            name = buf[off:off + ln].decode()
            off += ln
            (ndim,) = struct.unpack_from("<B", buf, off)
            off += 1
            shape = struct.unpack_from(f"<{ndim}I", buf, off)
            off += 4 * ndim
            size = int(np.prod(shape))
            params[name] = np.frombuffer(buf, "<f8", size, off).reshape(shape).copy()
            off += 8 * size
        return cls(params, LSTMConfig(**header["config"]), header["input_dim"], header["threshold"],
                   tuple(header["columns"]), best_epoch=header["best_epoch"], meta=header["meta"])


# ---------------------------------------------------------------------------
# forward

def _forward(p: dict[str, Tensor], x: np.ndarray, cfg: LSTMConfig,
             rng: np.random.Generator | None = None, probe: dict | None = None) -> Tensor:
    """Logits for a batch ``x`` of shape (B, L, d). Dropout iff ``rng`` is given."""
    B, L, _ = x.shape
    H = cfg.hidden_dim
    keep = 1.0 - cfg.dropout
    inputs: list = [x[:, k, :] for k in range(L)]
    for layer in range(cfg.num_layers):
        w_ih, w_hh, b = p[f"lstm{layer}.w_ih"], p[f"lstm{layer}.w_hh"], p[f"lstm{layer}.b"]
        h = c = None
        outputs = []
        for k in range(L):
            gates = ad.linear(inputs[k], w_ih, b)
            if h is not None:
                gates = gates + ad.linear(h, w_hh)
            i_g = ad.sigmoid(gates[:, :H])
            f_g = ad.sigmoid(gates[:, H:2 * H])
            g_g = ad.tanh(gates[:, 2 * H:3 * H])
            o_g = ad.sigmoid(gates[:, 3 * H:])
            c = i_g * g_g if c is None else f_g * c + i_g * g_g
            h = o_g * ad.tanh(c)
            outputs.append(h)
        if rng is not None:
            mask = (rng.random((B, L, H)) < keep) / keep
            outputs = [o * mask[:, k, :] for k, o in enumerate(outputs)]
        inputs = outputs
    hs = ad.stack(inputs, axis=1)  # (B, L, H)

    e = ad.reshape(ad.linear(ad.tanh(ad.linear(hs, p["attn.w"])),
                             ad.reshape(p["attn.v"], (1, H))), (B, L))
    beta = ad.softmax(e, axis=1)
    ctx = ad.sum_(ad.reshape(beta, (B, L, 1)) * hs, axis=1)  # (B, H)

    mu = ad.mean(ctx, axis=1, keepdims=True)
    cen = ctx - mu
    var = ad.mean(cen * cen, axis=1, keepdims=True)
    normed = cen * ad.power(var + LN_EPS, -0.5)
    ln = normed * p["ln.gain"] + p["ln.bias"]

    z1 = ad.relu(ad.linear(ln, p["head.w1"], p["head.b1"]))
    if rng is not None:
        z1 = z1 * ((rng.random(z1.shape) < keep) / keep)
    z2 = ad.relu(ad.linear(z1, p["head.w2"], p["head.b2"]))
    s = ad.reshape(ad.linear(z2, ad.reshape(p["head.w_out"], (1, HEAD_2)), p["head.b_out"]), (B,))
    if probe is not None:
        probe.update(beta=beta.data, scores=e.data, context=ctx.data, normed=normed.data, hidden=hs.data)
    return s


def _check_input(model: LSTMModel, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 2:
        x = x[None]
    if x.ndim != 3 or x.shape[2] != model.input_dim:
        raise ShapeMismatch(f"expected (B, L, {model.input_dim}) input, got {x.shape}")
    return x


def _consts(params: dict[str, np.ndarray]) -> dict[str, Tensor]:
    return {k: Tensor(v) for k, v in params.items()}


def lstm_forward(model: LSTMModel, window, train_mode: bool = False,
                 rng: np.random.Generator | None = None, probe: dict | None = None):
    """Probability and attention weights for one window.

    ``window`` is a :class:`~occdetect.features.SequenceWindow` or a ``d x L``
    matrix. In train mode dropout masks are drawn from ``rng``.
    """
    mat = window.matrix if hasattr(window, "matrix") else np.asarray(window, dtype=np.float64)
    if mat.ndim != 2 or mat.shape[0] != model.input_dim:
        raise ShapeMismatch(f"expected a {model.input_dim} x L window, got {mat.shape}")
    x = mat.T[None]
    if train_mode and rng is None:
        rng = np.random.default_rng(model.config.seed)
    info = {} if probe is None else probe
    with ad.no_grad():
        s = _forward(_consts(model.params), x, model.config, rng if train_mode else None, info)
    prob = float(0.5 * (1.0 + np.tanh(0.5 * s.data[0])))
    return prob, info["beta"][0]


def predict_proba(model: LSTMModel, windows: WindowSet | np.ndarray, batch: int | None = None) -> np.ndarray:
    """Eval-mode probabilities for every window (no dropout, no graph)."""
    batch = batch or model.config.eval_batch
    params = _consts(model.params)
    n = len(windows)
    out = np.empty(n)
    with ad.no_grad():
        for a in range(0, n, batch):
            xb = windows.batch(slice(a, a + batch)) if isinstance(windows, WindowSet) \
                else _check_input(model, windows[a:a + batch])
            if xb.shape[2] != model.input_dim:
                raise ShapeMismatch(f"expected {model.input_dim} features, got {xb.shape[2]}")
            s = _forward(params, xb, model.config).data
            out[a:a + batch] = 0.5 * (1.0 + np.tanh(0.5 * s))
    return out


def weighted_bce(prob, label, pos_weight: float = 1.0):
    """-[w y ln p + (1 - y) ln(1 - p)], with p clamped to [1e-12, 1 - 1e-12]."""
    p = np.clip(np.asarray(prob, dtype=np.float64), 1e-12, 1.0 - 1e-12)
    y = np.asarray(label, dtype=np.float64)
    out = -(pos_weight * y * np.log(p) + (1.0 - y) * np.log(1.0 - p))
    return float(out) if out.ndim == 0 else out


def loss_and_grads(params: dict[str, np.ndarray], x: np.ndarray, y: np.ndarray, cfg: LSTMConfig,
                   pos_weight: float = 1.0, rng: np.random.Generator | None = None):
    """Mean weighted BCE over a batch and its gradient for every parameter."""
    leaves = {k: Tensor(v, requires_grad=True) for k, v in params.items()}
    s = _forward(leaves, x, cfg, rng)
    loss = ad.bce_with_logits(s, y, pos_weight)
    loss.backward()
    grads = {k: (t.grad if t.grad is not None else np.zeros_like(t.data)) for k, t in leaves.items()}
    return float(loss.data), grads


# ---------------------------------------------------------------------------
# gradient check

def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> np.ndarray:
    """|a - n| / max(|a|, |n|, floor)."""
    return np.abs(analytic - numeric) / np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)


def grad_check(model: LSTMModel, window, label: int, pos_weight: float = 1.0,
               step: float = 1e-5, groups: tuple[str, ...] | None = None) -> float | dict:
    """Max relative error of analytic vs central-difference parameter gradients.

    Dropout is off. With ``groups`` (name prefixes) a per-group dict is returned.
    """
    mat = window.matrix if hasattr(window, "matrix") else np.asarray(window)
    x = mat.T[None]
    y = np.array([float(label)])
    cfg = model.config
    _, grads = loss_and_grads(model.params, x, y, cfg, pos_weight)

    def loss_at(params):
        with ad.no_grad():
            s = _forward(_consts(params), x, cfg)
        return float(ad.bce_with_logits(s, y, pos_weight).data)

    params = {k: v.copy() for k, v in model.params.items()}
    errors = {}
    for name, arr in params.items():
        num = np.zeros_like(arr)
        flat = arr.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            up = loss_at(params)
            flat[i] = orig - step
            down = loss_at(params)
            flat[i] = orig
            num.reshape(-1)[i] = (up - down) / (2 * step)
        errors[name] = float(relative_error(grads[name], num).max())
    if groups is None:
        return max(errors.values())
    return {g: max(v for k, v in errors.items() if k.startswith(g)) for g in groups}


# ---------------------------------------------------------------------------
# training

class Adam:
    def __init__(self, params: dict[str, np.ndarray], lr: float, b1=0.9, b2=0.999, eps=1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, b1, b2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for k, g in grads.items():
            m = self.m[k]
            v = self.v[k]
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            params[k] -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def _clip(grads: dict[str, np.ndarray], max_norm: float) -> None:
    norm = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
    if norm > max_norm > 0:
        scale = max_norm / norm
        for g in grads.values():
            g *= scale


def lstm_train(windows: WindowSet, val_windows: WindowSet | None, config: LSTMConfig = LSTMConfig(),
               fixed_epochs: int | None = None, columns: tuple[str, ...] = ()) -> LSTMModel:
    """Mini-batch Adam on weighted BCE.

    Every epoch the validation AUC is measured; the learning rate halves after
    ``patience // 2`` epochs without improvement and training stops after
    ``patience``. The best-AUC parameters are returned. With
    ``val_windows=None`` exactly ``fixed_epochs`` epochs run and the final
    parameters are kept (used when retraining on train+val).
    """
    y = windows.labels.astype(np.float64)
    n_pos = int(y.sum())
    if n_pos == 0 or n_pos == len(y):
        raise SingleClassTraining("training windows contain a single class")
    pos_weight = config.pos_weight if config.pos_weight is not None else (len(y) - n_pos) / n_pos
    if val_windows is None and fixed_epochs is None:
        raise ValueError("fixed_epochs is required without a validation set")

    rng = np.random.default_rng(config.seed)
    input_dim = windows.d
    params = init_params(input_dim, config, rng)
    opt = Adam(params, config.learning_rate)
    model = LSTMModel(params, config, input_dim, columns=tuple(columns),
                      meta={"pos_weight": pos_weight})

    epochs = fixed_epochs if val_windows is None else config.max_epochs
    best_auc, best_epoch, best_params = -np.inf, 0, copy.deepcopy(params)
    since_best = 0
    reduce_every = max(1, config.patience // 2)
    trace = []
    for epoch in range(1, epochs + 1):
        order = rng.permutation(len(windows))
        total, count = 0.0, 0
        for a in range(0, len(order), config.batch_size):
            idx = order[a:a + config.batch_size]
            loss, grads = loss_and_grads(params, windows.batch(idx), y[idx], config, pos_weight, rng)
            if not math.isfinite(loss):
                raise NonFiniteLoss(f"training loss became {loss} in epoch {epoch}")
            _clip(grads, config.grad_clip)
            opt.step(params, grads)
            total += loss * len(idx)
            count += len(idx)
        train_loss = total / count

        if val_windows is None:
            trace.append((epoch, train_loss, float("nan"), opt.lr))
            log.info("epoch %d loss %.4f", epoch, train_loss)
            best_epoch, best_params = epoch, params
            continue
        val_auc = roc_auc(predict_proba(model, val_windows), val_windows.labels)
        trace.append((epoch, train_loss, val_auc, opt.lr))
        log.info("epoch %d loss %.4f val_auc %.4f lr %.2e", epoch, train_loss, val_auc, opt.lr)
        if val_auc > best_auc:
            best_auc, best_epoch, best_params = val_auc, epoch, copy.deepcopy(params)
            since_best = 0
        else:
            since_best += 1
            if since_best % reduce_every == 0:
                opt.lr *= 0.5
        if since_best >= config.patience:
            break

    model.params = {k: v.copy() for k, v in best_params.items()}
    model.trace = trace
    model.best_epoch = best_epoch
    return model


def write_trace(trace, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "train_loss", "val_auc", "learning_rate"])
        for epoch, loss, auc, lr in trace:
            w.writerow([epoch, repr(loss), "" if math.isnan(auc) else repr(auc), repr(lr)])
