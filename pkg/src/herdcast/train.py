"""Adam, early-stopped training, ``.hxm`` checkpoints and the sklearn-style classifier."""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from .dataset import SampleSet, Standardizer
from .formats import BadMagicError, FormatError, Reader, UnsupportedVersionError
from .nn import (N_CLASSES, DEFAULT_HIDDEN, DEFAULT_INTER_DROPOUT, DEFAULT_LSTM_DROPOUT, DropoutPlan, LstmModel,
                 cross_entropy, lstm_forward, loss_and_backward, predict_proba, scaled_widths)

log = logging.getLogger(__name__)

HXM_MAGIC = b"HXM1"
HXM_VERSION = 1
DEFAULT_LEARNING_RATE = 0.0018


class TrainingDivergedError(RuntimeError):
    def __init__(self, epoch: int, loss: float):
        super().__init__(f"training diverged at epoch {epoch} (loss={loss})")
        self.epoch = epoch
        self.loss = loss


class NotACheckpointError(BadMagicError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = DEFAULT_LEARNING_RATE
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    batch_size: int = 64
    max_epochs: int = 200
    patience: int = 5
    min_delta: float = 1e-4
    loss_steps: str = "final"
    seed: int = 0

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("beta1 and beta2 must lie in [0, 1)")
        if self.batch_size < 1 or self.patience < 1 or self.max_epochs < 1:
            raise ValueError("batch_size, patience and max_epochs must be at least 1")


@dataclass
class AdamState:
    m: dict
    v: dict
    step: int = 0

    @classmethod
    def zeros_like(cls, params) -> "AdamState":
        if isinstance(params, dict):
            return cls({k: np.zeros_like(p, dtype=np.float64) for k, p in params.items()},
                       {k: np.zeros_like(p, dtype=np.float64) for k, p in params.items()})
        return cls({None: np.zeros_like(params, dtype=np.float64)}, {None: np.zeros_like(params, dtype=np.float64)})


def adam_step(params, grads, state: AdamState, cfg: TrainConfig = TrainConfig()):
    """One bias-corrected Adam update.

    ``params``/``grads`` are matching dicts of arrays (or two arrays). Arrays
    in ``params`` and ``state`` are updated in place and also returned.
    """
    single = not isinstance(params, dict)
    if single:
        params, grads = {None: params}, {None: grads}
    if set(params) != set(grads) or set(params) != set(state.m):
        raise ValueError("params, grads and optimizer state have different keys")
    state.step += 1
    t = state.step
    bc1 = 1.0 - cfg.beta1 ** t
    bc2 = 1.0 - cfg.beta2 ** t
    for k, p in params.items():
        g = np.asarray(grads[k], dtype=np.float64)
        if g.shape != np.shape(p) or state.m[k].shape != g.shape:
            raise ValueError(f"shape mismatch for parameter {k!r}: {np.shape(p)} vs {g.shape}")
        m = state.m[k]
        v = state.v[k]
        m *= cfg.beta1
        m += (1.0 - cfg.beta1) * g
        v *= cfg.beta2
        v += (1.0 - cfg.beta2) * (g * g)
        m_hat = m / bc1
        v_hat = v / bc2
        p -= cfg.learning_rate * m_hat / (np.sqrt(v_hat) + cfg.epsilon)
    return (params[None] if single else params), state


@dataclass
class TrainHistory:
    train_loss: list = field(default_factory=list)
    val_loss: list = field(default_factory=list)
    val_accuracy: list = field(default_factory=list)
    best_epoch: int = 0
    stopped_early: bool = False
    metadata: dict = field(default_factory=dict)

    @property
    def epochs(self) -> int:
        return len(self.val_loss)

    def to_dict(self) -> dict:
        return asdict(self)


def evaluate_loss(model: LstmModel, X, y, steps: str = "final", batch_size: int = 1024):
    """Mean dropout-free log loss and accuracy of ``model`` on standardized windows."""
    total, correct = 0.0, 0
    for lo in range(0, len(X), batch_size):
        fwd = lstm_forward(model, X[lo:lo + batch_size], None, keep_cache=False)
        yb = y[lo:lo + batch_size]
        loss, _ = cross_entropy(fwd.logits, yb, steps)
        total += loss * len(yb)
        correct += int(np.sum(np.argmax(fwd.logits[:, -1], axis=1) == yb))
    return total / len(X), correct / len(X)


def fit(model: LstmModel, X_train, y_train, X_val, y_val, cfg: TrainConfig = TrainConfig(), callback=None):
    """Train ``model`` in place with shuffled mini-batches until validation loss stops improving.

    Returns ``(best_model, history)``; ``best_model`` carries the weights of the
    epoch with the lowest validation loss.
    """
    X_train = np.asarray(X_train, dtype=np.float64)
    y_train = np.asarray(y_train, dtype=np.int64)
    X_val = np.asarray(X_val, dtype=np.float64)
    y_val = np.asarray(y_val, dtype=np.int64)
    if len(X_train) == 0 or len(X_val) == 0:
        raise ValueError("training and validation sets must be non-empty")
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0xF17]))
    plan = DropoutPlan("train", rng=np.random.default_rng(np.random.SeedSequence([cfg.seed, 0xD0])))
    state = AdamState.zeros_like(model.params)
    history = TrainHistory(metadata={"learning_rate": cfg.learning_rate, "beta1": cfg.beta1, "beta2": cfg.beta2,
                                     "epsilon": cfg.epsilon, "batch_size": cfg.batch_size,
                                     "patience": cfg.patience, "min_delta": cfg.min_delta, "seed": cfg.seed,
                                     "loss_steps": cfg.loss_steps})
    best = model.copy()
    best_loss = np.inf
    waited = 0
    n = len(X_train)
    for epoch in range(1, cfg.max_epochs + 1):
        order = rng.permutation(n)
        running = 0.0
        for lo in range(0, n, cfg.batch_size):
            idx = order[lo:lo + cfg.batch_size]
            loss, grads = loss_and_backward(model, X_train[idx], y_train[idx], plan, cfg.loss_steps)
            if not np.isfinite(loss):
                raise TrainingDivergedError(epoch, loss)
            adam_step(model.params, grads, state, cfg)
            running += loss * len(idx)
        val_loss, val_acc = evaluate_loss(model, X_val, y_val, cfg.loss_steps)
        if not np.isfinite(val_loss):
            raise TrainingDivergedError(epoch, val_loss)
        history.train_loss.append(running / n)
        history.val_loss.append(val_loss)
        history.val_accuracy.append(val_acc)
        log.info("epoch %d train %.4f val %.4f acc %.4f", epoch, running / n, val_loss, val_acc)
        if callback is not None:
            callback(epoch, history)
        if val_loss < best_loss - cfg.min_delta:
            best_loss = val_loss
            best = model.copy()
            history.best_epoch = epoch
            waited = 0
        else:
            waited += 1
            if waited >= cfg.patience:
                history.stopped_early = True
                break
    best.metadata.update({"epochs": history.epochs, "best_epoch": history.best_epoch,
                          "learning_rate": cfg.learning_rate, "seed": cfg.seed})
    return best, history


def save_checkpoint(model: LstmModel, path) -> None:
    """Write ``model`` as ``.hxm``: magic, version, JSON metadata block, then float64 arrays."""
    arrays = list(model.params.items())
    if model.mean is not None:
        arrays += [("mean", model.mean), ("scale", model.scale)]
    header = {
        "n_features": model.n_features,
        "hidden_sizes": list(model.hidden_sizes),
        "n_classes": model.n_classes,
        "lstm_dropout": model.lstm_dropout,
        "inter_layer_dropout": model.inter_layer_dropout,
        "metadata": model.metadata,
        "arrays": [[name, list(np.shape(a))] for name, a in arrays],
    }
    meta = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(HXM_MAGIC)
        fh.write(struct.pack("<II", HXM_VERSION, len(meta)))
        fh.write(meta)
        for _, a in arrays:
            fh.write(np.ascontiguousarray(a, dtype="<f8").tobytes())


def load_checkpoint(path) -> LstmModel:
    with open(path, "rb") as fh:
        rd = Reader(fh.read(), str(path))
    if rd.take(4) != HXM_MAGIC:
        raise NotACheckpointError(f"{path}: not a checkpoint")
    version, meta_len = rd.unpack("<II")
    if version != HXM_VERSION:
        raise UnsupportedVersionError(f"{path}: checkpoint version {version} is not supported "
                                      f"(expected {HXM_VERSION})", version)
    try:
        header = json.loads(rd.take(meta_len).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: corrupt checkpoint metadata") from exc
    arrays = {}
    for name, shape in header["arrays"]:
        count = int(np.prod(shape)) if shape else 1
        arrays[name] = np.frombuffer(rd.take(8 * count), dtype="<f8").reshape(shape).astype(np.float64)
    if rd.pos != len(rd.data):
        raise FormatError(f"{path}: {len(rd.data) - rd.pos} unexpected trailing bytes")
    mean = arrays.pop("mean", None)
    scale = arrays.pop("scale", None)
    model = LstmModel(header["n_features"], tuple(header["hidden_sizes"]), header["n_classes"], arrays,
                      header["lstm_dropout"], header["inter_layer_dropout"], mean, scale, header["metadata"])
    model.validate()
    return model


def _check_windows(X, n_features=None) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 3:
        raise ValueError(f"expected X of shape (n_samples, n_steps, n_features), got {X.shape}")
    if n_features is not None and X.shape[2] != n_features:
        raise ValueError(f"X has {X.shape[2]} features, model expects {n_features}")
    if not np.all(np.isfinite(X)):
        raise ValueError("X contains non-finite values")
    return X


class LSTMClassifier(ClassifierMixin, BaseEstimator):
    """Predict a herder's upcoming target ID from a window of state variables.

    Parameters
    ----------
    hidden_sizes : tuple of int
        Widths of the stacked LSTM layers before scaling.
    scale : float
        Width multiplier; ``scale=1`` keeps ``hidden_sizes`` as given.
    learning_rate, beta1, beta2, epsilon : float
        Adam constants.
    batch_size, max_epochs, patience : int
        Mini-batch size, epoch budget and early-stopping patience.
    min_delta : float
        Smallest validation-loss decrease that counts as an improvement.
    lstm_dropout, inter_layer_dropout : float
        Dropout on each LSTM layer's input and after each LSTM layer.
    loss_steps : {"final", "all"}
        Score only the last timestep, or every timestep against the same label.
    standardize : bool
        Z-score channels with statistics of the training portion.
    validation_fraction : float
        Share of ``X`` held out for early stopping when no explicit
        validation set is passed to ``fit``.
    n_classes : int
        Number of output classes (target IDs 0..4 by default).
    random_state : int
        Seed for initialisation, shuffling, dropout and the validation split.
    """

    def __init__(self, hidden_sizes=DEFAULT_HIDDEN, scale=1.0, learning_rate=DEFAULT_LEARNING_RATE, beta1=0.9,
                 beta2=0.999, epsilon=1e-8, batch_size=64, max_epochs=200, patience=5, min_delta=1e-4,
                 lstm_dropout=DEFAULT_LSTM_DROPOUT, inter_layer_dropout=DEFAULT_INTER_DROPOUT, loss_steps="final",
                 standardize=True, validation_fraction=0.1, n_classes=N_CLASSES, random_state=0):
        self.hidden_sizes = hidden_sizes
        self.scale = scale
        self.learning_rate = learning_rate
        self.beta1 = beta1
        self.beta2 = beta2
        self.epsilon = epsilon
        self.batch_size = batch_size
        self.max_epochs = max_epochs
        self.patience = patience
        self.min_delta = min_delta
        self.lstm_dropout = lstm_dropout
        self.inter_layer_dropout = inter_layer_dropout
        self.loss_steps = loss_steps
        self.standardize = standardize
        self.validation_fraction = validation_fraction
        self.n_classes = n_classes
        self.random_state = random_state

    def _train_config(self) -> TrainConfig:
        return TrainConfig(self.learning_rate, self.beta1, self.beta2, self.epsilon, self.batch_size,
                           self.max_epochs, self.patience, self.min_delta, self.loss_steps, self.random_state)

    def fit(self, X, y, X_val=None, y_val=None, metadata: Optional[dict] = None):
        X = _check_windows(X)
        y = np.asarray(y, dtype=np.int64)
        if len(y) != len(X):
            raise ValueError("X and y have different lengths")
        if np.any((y < 0) | (y >= self.n_classes)):
            raise ValueError(f"labels must lie in 0..{self.n_classes - 1}")
        if X_val is None:
            rng = np.random.default_rng(np.random.SeedSequence([self.random_state, 0x7A1]))
            order = rng.permutation(len(X))
            n_val = max(1, int(round(self.validation_fraction * len(X))))
            X_val, y_val = X[order[:n_val]], y[order[:n_val]]
            X, y = X[order[n_val:]], y[order[n_val:]]
        else:
            X_val = _check_windows(X_val, X.shape[2])
            y_val = np.asarray(y_val, dtype=np.int64)

        widths = scaled_widths(self.scale, self.hidden_sizes) if self.scale != 1.0 else tuple(self.hidden_sizes)
        model = LstmModel.initialize(X.shape[2], widths, self.n_classes, self.random_state,
                                     self.lstm_dropout, self.inter_layer_dropout)
        if self.standardize:
            std = Standardizer().fit(X)
            model.mean, model.scale = std.mean_, std.scale_
            X, X_val = std.transform(X), std.transform(X_val)
        best, history = fit(model, X, y, X_val, y_val, self._train_config())
        best.mean, best.scale = model.mean, model.scale
        best.metadata.update(metadata or {})
        self.model_ = best
        self.history_ = history
        self.classes_ = np.arange(self.n_classes)
        self.n_features_in_ = X.shape[2]
        return self

    def fit_samples(self, train: SampleSet, validation: Optional[SampleSet] = None, **metadata):
        meta = {"horizon": train.horizon, "stride": train.stride}
        meta.update({k: v for k, v in train.meta.items() if k in ("expertise", "config_hash")})
        meta.update(metadata)
        if validation is None:
            return self.fit(train.X, train.y, metadata=meta)
        return self.fit(train.X, train.y, validation.X, validation.y, metadata=meta)

    @classmethod
    def from_model(cls, model: LstmModel) -> "LSTMClassifier":
        clf = cls(hidden_sizes=model.hidden_sizes, lstm_dropout=model.lstm_dropout,
                  inter_layer_dropout=model.inter_layer_dropout, standardize=model.mean is not None,
                  n_classes=model.n_classes)
        clf.model_ = model
        clf.classes_ = np.arange(model.n_classes)
        clf.n_features_in_ = model.n_features
        return clf

    def _prepare(self, X) -> np.ndarray:
        check_is_fitted(self, "model_")
        X = _check_windows(X, self.model_.n_features)
        if self.model_.mean is not None:
            X = (X - self.model_.mean) / self.model_.scale
        return X

    def predict_proba(self, X) -> np.ndarray:
        return predict_proba(self.model_, self._prepare(X))

    def predict(self, X) -> np.ndarray:
        # argmax keeps the first maximum, so ties go to the lower class index
        return np.argmax(self.predict_proba(X), axis=1)

    def save(self, path) -> None:
        check_is_fitted(self, "model_")
        save_checkpoint(self.model_, path)

    @classmethod
    def load(cls, path) -> "LSTMClassifier":
        return cls.from_model(load_checkpoint(path))
