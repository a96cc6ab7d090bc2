"""Stacked LSTM sequence classifier in float64 numpy with exact backpropagation through time.

Gate order inside every ``4H`` block is (input, forget, cell, output).
Parameters live in a flat ordered dict::

    W{l} (in_l, 4H_l)   input weights of layer l
    U{l} (H_l, 4H_l)    recurrent weights
    b{l} (4H_l,)        biases
    Wd   (H_last, C)    dense head
    bd   (C,)
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.special import expit

DEFAULT_HIDDEN = (253, 25, 8)
DEFAULT_LSTM_DROPOUT = 0.1145
DEFAULT_INTER_DROPOUT = 0.0145
N_CLASSES = 5


def scaled_widths(scale: float, base=DEFAULT_HIDDEN) -> tuple[int, ...]:
    """Hidden widths multiplied by ``scale``; the last layer never drops below 4 units."""
    if not scale > 0:
        raise ValueError("scale must be positive")
    widths = [max(1, math.ceil(w * scale - 1e-9)) for w in base]
    widths[-1] = max(4, widths[-1])
    return tuple(widths)


@dataclass
class LstmModel:
    n_features: int
    hidden_sizes: tuple
    n_classes: int
    params: dict
    lstm_dropout: float = DEFAULT_LSTM_DROPOUT
    inter_layer_dropout: float = DEFAULT_INTER_DROPOUT
    mean: Optional[np.ndarray] = None
    scale: Optional[np.ndarray] = None
    metadata: dict = field(default_factory=dict)

    @classmethod
    def initialize(cls, n_features: int = 48, hidden_sizes=DEFAULT_HIDDEN, n_classes: int = N_CLASSES,
                   seed: int = 0, lstm_dropout: float = DEFAULT_LSTM_DROPOUT,
                   inter_layer_dropout: float = DEFAULT_INTER_DROPOUT) -> "LstmModel":
        """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, forget-gate bias 1."""
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0x1517]))
        params = {}
        fan = n_features
        for layer, H in enumerate(hidden_sizes):
            k_in, k_rec = 1.0 / math.sqrt(fan), 1.0 / math.sqrt(H)
            params[f"W{layer}"] = rng.uniform(-k_in, k_in, (fan, 4 * H))
            params[f"U{layer}"] = rng.uniform(-k_rec, k_rec, (H, 4 * H))
            b = rng.uniform(-k_rec, k_rec, 4 * H)
            b[H:2 * H] = 1.0
            params[f"b{layer}"] = b
            fan = H
        k = 1.0 / math.sqrt(fan)
        params["Wd"] = rng.uniform(-k, k, (fan, n_classes))
        params["bd"] = rng.uniform(-k, k, n_classes)
        return cls(n_features, tuple(int(h) for h in hidden_sizes), n_classes, params,
                   lstm_dropout, inter_layer_dropout)

    @property
    def n_layers(self) -> int:
        return len(self.hidden_sizes)

    def param_shapes(self) -> dict:
        shapes = {}
        fan = self.n_features
        for layer, H in enumerate(self.hidden_sizes):
            shapes[f"W{layer}"] = (fan, 4 * H)
            shapes[f"U{layer}"] = (H, 4 * H)
            shapes[f"b{layer}"] = (4 * H,)
            fan = H
        shapes["Wd"] = (fan, self.n_classes)
        shapes["bd"] = (self.n_classes,)
        return shapes

    def validate(self) -> None:
        shapes = self.param_shapes()
        if list(shapes) != list(self.params):
            raise ValueError("parameter names do not match the layer layout")
        for name, shape in shapes.items():
            if self.params[name].shape != shape:
                raise ValueError(f"parameter {name} has shape {self.params[name].shape}, expected {shape}")
            if not np.all(np.isfinite(self.params[name])):
                raise ValueError(f"parameter {name} is not finite")
        for rate in (self.lstm_dropout, self.inter_layer_dropout):
            if not 0.0 <= rate < 1.0:
                raise ValueError("dropout rates must lie in [0, 1)")

    def copy(self) -> "LstmModel":
        return LstmModel(self.n_features, self.hidden_sizes, self.n_classes,
                         {k: v.copy() for k, v in self.params.items()}, self.lstm_dropout,
                         self.inter_layer_dropout,
                         None if self.mean is None else self.mean.copy(),
                         None if self.scale is None else self.scale.copy(), dict(self.metadata))

    def n_parameters(self) -> int:
        return int(sum(v.size for v in self.params.values()))


@dataclass
class DropoutPlan:
    """Train-mode plans draw fresh per-timestep inverted-dropout masks from ``seed``'s stream."""

    mode: str = "inference"
    seed: int = 0
    rng: Optional[np.random.Generator] = None

    def __post_init__(self):
        if self.mode not in ("train", "inference"):
            raise ValueError("mode must be 'train' or 'inference'")
        if self.rng is None:
            self.rng = np.random.default_rng(np.random.SeedSequence([self.seed, 0xD0]))

    @classmethod
    def train(cls, seed: int = 0) -> "DropoutPlan":
        return cls("train", seed)

    @classmethod
    def inference(cls) -> "DropoutPlan":
        return cls("inference")

    def mask(self, shape, rate: float) -> Optional[np.ndarray]:
        if self.mode == "inference" or rate <= 0.0:
            return None
        keep = 1.0 - rate
        return (self.rng.random(shape) < keep) / keep


_sigmoid = expit


def softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


@dataclass
class ForwardResult:
    logits: np.ndarray          # (B, T, C)
    cache: list = field(repr=False, default_factory=list)
    top: Optional[np.ndarray] = field(repr=False, default=None)

    @property
    def probabilities(self) -> np.ndarray:
        return softmax(self.logits)


def _as_batch(X) -> tuple[np.ndarray, bool]:
    X = np.asarray(X, dtype=np.float64)
    single = X.ndim == 2
    if single:
        X = X[None]
    if X.ndim != 3:
        raise ValueError(f"expected input of shape (T, F) or (B, T, F), got {X.shape}")
    return X, single


def lstm_forward(model: LstmModel, X, plan: Optional[DropoutPlan] = None, keep_cache: bool = True) -> ForwardResult:
    """Run the network over ``X`` of shape ``(T, F)`` or ``(B, T, F)``.

    Initial hidden and cell states are zero. In train mode every LSTM layer's
    input gets a ``lstm_dropout`` mask and every layer's output an
    ``inter_layer_dropout`` mask, both redrawn per timestep.
    """
    X, single = _as_batch(X)
    if not np.all(np.isfinite(X)):
        raise ValueError("input contains non-finite values")
    if X.shape[-1] != model.n_features:
        raise ValueError(f"model expects {model.n_features} features, got {X.shape[-1]}")
    plan = plan or DropoutPlan.inference()
    B, T, _ = X.shape
    p = model.params
    cache = []
    inp = X
    for layer, H in enumerate(model.hidden_sizes):
        in_mask = plan.mask(inp.shape, model.lstm_dropout)
        x = inp * in_mask if in_mask is not None else inp
        W, U, b = p[f"W{layer}"], p[f"U{layer}"], p[f"b{layer}"]
        xw = (x.reshape(B * T, -1) @ W).reshape(B, T, 4 * H) + b
        hs = np.zeros((B, T + 1, H))
        cs = np.zeros((B, T + 1, H))
        gates = np.empty((B, T, 4 * H))
        for t in range(T):
            z = xw[:, t] + hs[:, t] @ U
            gt = gates[:, t]
            _sigmoid(z, out=gt)
            np.tanh(z[:, 2 * H:3 * H], out=gt[:, 2 * H:3 * H])
            i, f, g, o = gt[:, :H], gt[:, H:2 * H], gt[:, 2 * H:3 * H], gt[:, 3 * H:]
            c = f * cs[:, t] + i * g
            cs[:, t + 1] = c
            hs[:, t + 1] = o * np.tanh(c)
        out_mask = plan.mask((B, T, H), model.inter_layer_dropout)
        out = hs[:, 1:] * out_mask if out_mask is not None else hs[:, 1:]
        if keep_cache:
            cache.append((x, in_mask, gates, hs, cs, out_mask))
        inp = out
    logits = (inp.reshape(B * T, -1) @ p["Wd"]).reshape(B, T, -1) + p["bd"]
    if single:
        logits = logits[0]
    return ForwardResult(logits, cache, inp if keep_cache else None)


def _final_logits(model: LstmModel, X: np.ndarray) -> np.ndarray:
    # inference-only pass: no caches, and the head only sees the last hidden state
    B, T, _ = X.shape
    p = model.params
    inp = X
    for layer, H in enumerate(model.hidden_sizes):
        W, U, b = p[f"W{layer}"], p[f"U{layer}"], p[f"b{layer}"]
        xw = (inp.reshape(B * T, -1) @ W).reshape(B, T, 4 * H) + b
        h = np.zeros((B, H))
        c = np.zeros((B, H))
        hs = np.empty((B, T, H))
        for t in range(T):
            z = xw[:, t] + h @ U
            g = np.tanh(z[:, 2 * H:3 * H])
            _sigmoid(z, out=z)
            c = z[:, H:2 * H] * c + z[:, :H] * g
            h = z[:, 3 * H:] * np.tanh(c)
            hs[:, t] = h
        inp = hs
    return inp[:, -1] @ p["Wd"] + p["bd"]


def predict_proba(model: LstmModel, X, batch_size: int = 512) -> np.ndarray:
    """Final-timestep class probabilities, shape ``(B, C)``; no dropout."""
    X, _ = _as_batch(X)
    if not np.all(np.isfinite(X)):
        raise ValueError("input contains non-finite values")
    if X.shape[-1] != model.n_features:
        raise ValueError(f"model expects {model.n_features} features, got {X.shape[-1]}")
    out = np.empty((len(X), model.n_classes))
    for lo in range(0, len(X), batch_size):
        out[lo:lo + batch_size] = softmax(_final_logits(model, X[lo:lo + batch_size]))
    return out


def cross_entropy(logits: np.ndarray, y: np.ndarray, steps: str = "final") -> tuple[float, np.ndarray]:
    """Mean categorical cross-entropy and its gradient w.r.t. ``logits`` (B, T, C)."""
    B, T, C = logits.shape
    dlogits = np.zeros_like(logits)
    if steps == "final":
        logp = log_softmax(logits[:, -1])
        loss = -logp[np.arange(B), y].mean()
        d = np.exp(logp)
        d[np.arange(B), y] -= 1.0
        dlogits[:, -1] = d / B
    elif steps == "all":
        logp = log_softmax(logits)
        loss = -logp[np.arange(B), :, y].mean()
        d = np.exp(logp)
        d[np.arange(B), :, y] -= 1.0
        dlogits[:] = d / (B * T)
    else:
        raise ValueError("steps must be 'final' or 'all'")
    return float(loss), dlogits


def backward(model: LstmModel, fwd: ForwardResult, dlogits: np.ndarray) -> dict:
    """Gradients of a scalar loss for every parameter, given d loss / d logits."""
    p = model.params
    B, T, C = dlogits.shape
    grads = {}
    top = fwd.top
    grads["Wd"] = top.reshape(B * T, -1).T @ dlogits.reshape(B * T, C)
    grads["bd"] = dlogits.sum(axis=(0, 1))
    d_out = (dlogits.reshape(B * T, C) @ p["Wd"].T).reshape(B, T, -1)
    for layer in reversed(range(model.n_layers)):
        H = model.hidden_sizes[layer]
        x, in_mask, gates, hs, cs, out_mask = fwd.cache[layer]
        if out_mask is not None:
            d_out = d_out * out_mask
        U = p[f"U{layer}"]
        dz_all = np.empty((B, T, 4 * H))
        dh_next = np.zeros((B, H))
        dc_next = np.zeros((B, H))
        for t in reversed(range(T)):
            i, f, g, o = gates[:, t, :H], gates[:, t, H:2 * H], gates[:, t, 2 * H:3 * H], gates[:, t, 3 * H:]
            c = cs[:, t + 1]
            tc = np.tanh(c)
            dh = d_out[:, t] + dh_next
            dc = dh * o * (1.0 - tc * tc) + dc_next
            dz = dz_all[:, t]
            dz[:, :H] = dc * g * i * (1.0 - i)
            dz[:, H:2 * H] = dc * cs[:, t] * f * (1.0 - f)
            dz[:, 2 * H:3 * H] = dc * i * (1.0 - g * g)
            dz[:, 3 * H:] = dh * tc * o * (1.0 - o)
            dc_next = dc * f
            dh_next = dz @ U.T
        flat = dz_all.reshape(B * T, 4 * H)
        grads[f"W{layer}"] = x.reshape(B * T, -1).T @ flat
        grads[f"U{layer}"] = hs[:, :-1].reshape(B * T, H).T @ flat
        grads[f"b{layer}"] = flat.sum(axis=0)
        if layer > 0:
            d_out = (flat @ p[f"W{layer}"].T).reshape(B, T, -1)
            if in_mask is not None:
                d_out = d_out * in_mask
    return {name: grads[name] for name in p}


def loss_and_backward(model: LstmModel, X, y, plan: Optional[DropoutPlan] = None,
                      steps: str = "final") -> tuple[float, dict]:
    """Mean cross-entropy over the batch and exact gradients under the sampled dropout masks."""
    X, single = _as_batch(X)
    y = np.atleast_1d(np.asarray(y, dtype=np.int64))
    if len(X) == 0:
        raise ValueError("empty batch")
    if len(y) != len(X):
        raise ValueError("one label per sequence is required")
    if np.any((y < 0) | (y >= model.n_classes)):
        raise ValueError(f"labels must lie in 0..{model.n_classes - 1}")
    fwd = lstm_forward(model, X, plan)
    loss, dlogits = cross_entropy(fwd.logits, y, steps)
    return loss, backward(model, fwd, dlogits)


def grad_check(model: LstmModel, X, y, eps: float = 1e-5, n_params: int = 200, seed: int = 0,
               steps: str = "final", extrapolate: bool = False, return_details: bool = False):
    """Compare analytic gradients with central differences on a random parameter subset.

    Returns the maximum relative error ``|a - n| / max(|a|, |n|, 1e-12)``.
    At least one entry of every parameter array is checked.

    With ``extrapolate`` the numeric gradient is the Richardson combination
    ``(4 D(eps/2) - D(eps)) / 3`` of two central differences. Its O(eps^4)
    truncation error allows a step around 1e-2, which keeps float64
    cancellation below 1e-5 relative even for gradients near 1e-8; a plain
    central difference cannot reach that for such small gradients.
    """
    rng = np.random.default_rng(seed)
    _, grads = loss_and_backward(model, X, y, None, steps)
    names = list(model.params)
    sizes = np.array([model.params[k].size for k in names])
    picks = [(k, int(rng.integers(model.params[k].size))) for k in names]
    extra = max(0, n_params - len(picks))
    which = rng.choice(len(names), size=extra, p=sizes / sizes.sum())
    picks += [(names[w], int(rng.integers(sizes[w]))) for w in which]

    details = []
    worst = 0.0
    for name, flat in picks:
        num = numeric_gradient(model, X, y, name, flat, eps, steps)
        if extrapolate:
            num = (4.0 * numeric_gradient(model, X, y, name, flat, eps / 2.0, steps) - num) / 3.0
        ana = grads[name].reshape(-1)[flat]
        rel = abs(ana - num) / max(abs(ana), abs(num), 1e-12)
        worst = max(worst, rel)
        details.append((name, flat, ana, num, rel))
    return (worst, details) if return_details else worst


def numeric_gradient(model: LstmModel, X, y, name: str, flat: int, eps: float, steps: str = "final") -> float:
    """Central difference of the loss w.r.t. one scalar parameter (restored afterwards)."""
    arr = model.params[name].reshape(-1)
    orig = arr[flat]
    try:
        arr[flat] = orig + eps
        lp, _ = _loss_only(model, X, y, steps)
        arr[flat] = orig - eps
        lm, _ = _loss_only(model, X, y, steps)
    finally:
        arr[flat] = orig
    return (lp - lm) / (2.0 * eps)


def _loss_only(model, X, y, steps):
    X, _ = _as_batch(X)
    y = np.atleast_1d(np.asarray(y, dtype=np.int64))
    fwd = lstm_forward(model, X, None, keep_cache=False)
    return cross_entropy(fwd.logits, y, steps)
