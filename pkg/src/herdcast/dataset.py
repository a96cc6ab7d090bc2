"""Windowed samples, behaviour sub-classes, train/validation/test assembly and ``.hxs`` files."""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .features import N_FEATURES, trial_features
from .formats import BadMagicError, Reader, UnsupportedVersionError
from .ingest import N_HERDERS, N_TARGETS, Trial

N_SEQ = 25
SUBCLASSES = ("NT-NS", "NT-S", "T-NS", "T-S")
NT_NS, NT_S, T_NS, T_S = range(4)
ALLOWED_STRIDES = (1, 2, 4)
HXS_MAGIC = b"HXS1"
HXS_VERSION = 1
STD_FLOOR = 1e-12


class InsufficientSamplesError(ValueError):
    def __init__(self, shortfall: dict[str, tuple[int, int]]):
        self.shortfall = shortfall
        parts = [f"subclass {k} short by {need - have} (need {need}, have {have})"
                 for k, (need, have) in shortfall.items()]
        super().__init__("; ".join(parts))


def tag_subclass(window_labels, horizon_label) -> str:
    """Name the behaviour sub-class of one window.

    A window is transitioning when its labels take more than one value and
    switching when the horizon label differs from the label at the window's
    end.
    """
    w = np.asarray(window_labels)
    return SUBCLASSES[_subclass_code(w[None, :], np.asarray([horizon_label]))[0]]


def _subclass_code(windows: np.ndarray, horizon: np.ndarray) -> np.ndarray:
    transitioning = np.any(windows != windows[:, -1:], axis=1)
    switching = horizon != windows[:, -1]
    return 2 * transitioning.astype(np.int64) + switching.astype(np.int64)


@dataclass
class Sample:
    features: np.ndarray
    label: int
    subclass: str
    horizon: int
    stride: int
    trial_id: str
    focal: int
    t_f: int


@dataclass
class SampleSet:
    """A batch of windows: ``X`` has shape ``(n, 25, 48)``."""

    X: np.ndarray
    y: np.ndarray
    subclass: np.ndarray
    trial_id: np.ndarray
    focal: np.ndarray
    t_f: np.ndarray
    horizon: int
    stride: int
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.int64)
        self.subclass = np.asarray(self.subclass, dtype=np.int64)
        self.trial_id = np.asarray(self.trial_id, dtype=object)
        self.focal = np.asarray(self.focal, dtype=np.int64)
        self.t_f = np.asarray(self.t_f, dtype=np.int64)

    def __len__(self) -> int:
        return len(self.y)

    def __getitem__(self, i: int) -> Sample:
        return Sample(self.X[i], int(self.y[i]), SUBCLASSES[self.subclass[i]], self.horizon, self.stride,
                      str(self.trial_id[i]), int(self.focal[i]), int(self.t_f[i]))

    def keys(self) -> list[tuple[str, int, int]]:
        return list(zip(self.trial_id.tolist(), self.focal.tolist(), self.t_f.tolist()))

    def take(self, idx) -> "SampleSet":
        idx = np.asarray(idx, dtype=np.int64)
        return SampleSet(self.X[idx], self.y[idx], self.subclass[idx], self.trial_id[idx], self.focal[idx],
                         self.t_f[idx], self.horizon, self.stride, dict(self.meta))

    def subclass_counts(self) -> np.ndarray:
        return np.bincount(self.subclass, minlength=4)

    @classmethod
    def empty(cls, horizon: int, stride: int) -> "SampleSet":
        return cls(np.empty((0, N_SEQ, N_FEATURES)), [], [], [], [], [], horizon, stride)

    @classmethod
    def concat(cls, sets: Sequence["SampleSet"]) -> "SampleSet":
        if not sets:
            raise ValueError("nothing to concatenate")
        h, s = sets[0].horizon, sets[0].stride
        if any(x.horizon != h or x.stride != s for x in sets):
            raise ValueError("cannot concatenate sample sets with different horizon/stride")
        return cls(np.concatenate([x.X for x in sets]), np.concatenate([x.y for x in sets]),
                   np.concatenate([x.subclass for x in sets]), np.concatenate([x.trial_id for x in sets]),
                   np.concatenate([x.focal for x in sets]), np.concatenate([x.t_f for x in sets]),
                   h, s, dict(sets[0].meta))


def _check_window_args(stride: int, horizon: int) -> None:
    if stride not in ALLOWED_STRIDES:
        raise ValueError(f"stride must be one of {ALLOWED_STRIDES}")
    if horizon < 0:
        raise ValueError("horizon must be non-negative")


@dataclass
class SamplePool:
    """Every valid window of a set of trials, stored as an index into per-trial feature matrices."""

    features: list[np.ndarray]  # one (n_frames, 48) matrix per (trial, focal) stream
    stream_trial: list[str]
    stream_focal: list[int]
    stream: np.ndarray          # per window: index into ``features``
    t_f: np.ndarray
    y: np.ndarray
    subclass: np.ndarray
    horizon: int
    stride: int
    expertise: str = ""

    def __len__(self) -> int:
        return len(self.y)

    def subclass_counts(self) -> np.ndarray:
        return np.bincount(self.subclass, minlength=4)

    def take(self, idx) -> SampleSet:
        idx = np.asarray(idx, dtype=np.int64)
        X = np.empty((len(idx), N_SEQ, N_FEATURES))
        rows = np.arange(-(N_SEQ - 1) * self.stride, 1, self.stride)
        for j, k in enumerate(idx):
            X[j] = self.features[self.stream[k]][self.t_f[k] + rows]
        trial_ids = np.array([self.stream_trial[s] for s in self.stream[idx]], dtype=object)
        focal = np.array([self.stream_focal[s] for s in self.stream[idx]], dtype=np.int64)
        meta = {"expertise": self.expertise} if self.expertise else {}
        return SampleSet(X, self.y[idx], self.subclass[idx], trial_ids, focal, self.t_f[idx],
                         self.horizon, self.stride, meta)

    def all(self) -> SampleSet:
        return self.take(np.arange(len(self)))


def _windows(labels: np.ndarray, stride: int, horizon: int):
    n = len(labels)
    span = (N_SEQ - 1) * stride
    last = n - 1 - horizon * stride
    if last < span:
        return np.empty(0, dtype=np.int64), np.empty(0, dtype=np.int64), np.empty(0, dtype=np.int64)
    t_f = np.arange(span, last + 1)
    win = sliding_window_view(labels, span + 1)[: len(t_f), ::stride]
    y = labels[t_f + horizon * stride]
    return t_f, y, _subclass_code(win, y)


def build_pool(trials: Sequence[Trial], stride: int = 2, horizon: int = 16, center=(0.0, 0.0),
               successful_only: bool = True) -> SamplePool:
    """Window every labelled trial for both herders."""
    _check_window_args(stride, horizon)
    feats, s_trial, s_focal = [], [], []
    stream, t_fs, ys, subs = [], [], [], []
    expertise = {tr.expertise for tr in trials}
    for tr in trials:
        if successful_only and not tr.success:
            continue
        if not tr.is_labeled:
            raise ValueError(f"trial {tr.trial_id} is not labelled")
        if tr.n_frames < 3:
            continue
        for focal in range(N_HERDERS):
            t_f, y, sub = _windows(tr.labels[:, focal], stride, horizon)
            if len(t_f) == 0:
                continue
            stream.append(np.full(len(t_f), len(feats)))
            feats.append(trial_features(tr, focal, center))
            s_trial.append(tr.trial_id)
            s_focal.append(focal)
            t_fs.append(t_f)
            ys.append(y)
            subs.append(sub)
    cat = (lambda parts: np.concatenate(parts) if parts else np.empty(0, dtype=np.int64))
    return SamplePool(feats, s_trial, s_focal, cat(stream), cat(t_fs), cat(ys), cat(subs), horizon, stride,
                      expertise.pop() if len(expertise) == 1 else "")


def window_trial(trial: Trial, focal: int, stride: int = 2, horizon: int = 16, center=(0.0, 0.0)) -> SampleSet:
    """All samples of one herder in one trial, in increasing ``t_f`` order."""
    if not trial.is_labeled:
        raise ValueError(f"trial {trial.trial_id} is not labelled")
    if focal not in (0, 1):
        raise ValueError("focal must be 0 or 1")
    _check_window_args(stride, horizon)
    t_f, _, _ = _windows(trial.labels[:, focal], stride, horizon)
    if len(t_f) == 0 or trial.n_frames < 3:
        return SampleSet.empty(horizon, stride)
    pool = build_pool([trial], stride, horizon, center, successful_only=False)
    keep = np.flatnonzero(np.asarray(pool.stream_focal)[pool.stream] == focal)
    return pool.take(keep)


@dataclass
class SplitConfig:
    n_train: int = 21000
    n_test: int = 2000
    n_test_sets: int = 10
    balance: str = "balanced"
    validation_fraction: float = 0.10
    standardize: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.n_train <= 0 or self.n_test <= 0 or self.n_test_sets < 0:
            raise ValueError("n_train and n_test must be positive, n_test_sets non-negative")
        if not 0.0 < self.validation_fraction < 1.0:
            raise ValueError("validation_fraction must lie in (0, 1)")
        if self.balance not in ("balanced", "representative"):
            raise ValueError("balance must be 'balanced' or 'representative'")


@dataclass
class Split:
    train: SampleSet
    validation: SampleSet
    tests: list[SampleSet]
    mean: Optional[np.ndarray] = None
    scale: Optional[np.ndarray] = None


def _quota(total: int, weights: np.ndarray) -> np.ndarray:
    # largest-remainder apportionment, remainders to the lowest class index on ties
    exact = total * weights / weights.sum()
    base = np.floor(exact).astype(np.int64)
    order = sorted(range(len(weights)), key=lambda i: (-(exact[i] - base[i]), i))
    for i in order[: total - base.sum()]:
        base[i] += 1
    return base


def assemble_split(pool, cfg: SplitConfig) -> Split:
    """Draw disjoint train / validation / test sets from ``pool``.

    ``pool`` is a SamplePool or SampleSet. Balanced mode takes the same
    number of windows from every sub-class; representative mode keeps the
    pool's sub-class proportions.
    """
    counts = pool.subclass_counts()
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0x5A17]))
    if cfg.balance == "balanced":
        w = np.ones(4)
    else:
        if counts.sum() == 0:
            raise InsufficientSamplesError({"all": (cfg.n_train, 0)})
        w = counts.astype(np.float64)
    train_q = _quota(cfg.n_train, w)
    test_q = _quota(cfg.n_test, w)
    need = train_q + cfg.n_test_sets * test_q
    short = {SUBCLASSES[c]: (int(need[c]), int(counts[c])) for c in range(4) if need[c] > counts[c]}
    if short:
        raise InsufficientSamplesError(short)

    train_idx, test_idx = [], [[] for _ in range(cfg.n_test_sets)]
    for c in range(4):
        members = rng.permutation(np.flatnonzero(pool.subclass == c))
        train_idx.append(members[: train_q[c]])
        pos = train_q[c]
        for j in range(cfg.n_test_sets):
            test_idx[j].append(members[pos: pos + test_q[c]])
            pos += test_q[c]
    train_idx = rng.permutation(np.concatenate(train_idx))
    n_val = int(round(cfg.validation_fraction * len(train_idx)))
    val_idx, train_idx = train_idx[:n_val], train_idx[n_val:]
    tests = [rng.permutation(np.concatenate(parts)) for parts in test_idx]

    train = pool.take(train_idx)
    val = pool.take(val_idx)
    test_sets = [pool.take(t) for t in tests]
    split = Split(train, val, test_sets)
    if cfg.standardize:
        std = Standardizer().fit(train.X)
        split.mean, split.scale = std.mean_, std.scale_
        for s in [train, val, *test_sets]:
            s.X = std.transform(s.X)
    return split


class Standardizer(TransformerMixin, BaseEstimator):
    """Per-channel z-scoring of ``(n, T, F)`` windows; near-constant channels pass through."""

    def fit(self, X, y=None):
        X = _as_windows(X)
        flat = X.reshape(-1, X.shape[-1])
        mean = flat.mean(axis=0)
        std = flat.std(axis=0)
        constant = std < STD_FLOOR
        self.mean_ = np.where(constant, 0.0, mean)
        self.scale_ = np.where(constant, 1.0, std)
        self.n_features_in_ = X.shape[-1]
        return self

    def transform(self, X):
        check_is_fitted(self, "mean_")
        X = _as_windows(X)
        if X.shape[-1] != self.n_features_in_:
            raise ValueError(f"expected {self.n_features_in_} channels, got {X.shape[-1]}")
        return (X - self.mean_) / self.scale_

    def inverse_transform(self, X):
        check_is_fitted(self, "mean_")
        return _as_windows(X) * self.scale_ + self.mean_


def _as_windows(X) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 2:
        X = X[None]
    if X.ndim != 3:
        raise ValueError(f"expected windows of shape (n, T, F), got {X.shape}")
    if not np.all(np.isfinite(X)):
        raise ValueError("windows contain non-finite values")
    return X


def write_hxs(path, samples: SampleSet) -> None:
    n = len(samples)
    X = np.ascontiguousarray(samples.X, dtype="<f8")
    if X.shape[1:] != (N_SEQ, N_FEATURES):
        raise ValueError(f"samples must have shape (n, {N_SEQ}, {N_FEATURES})")
    ids = sorted(set(samples.trial_id.tolist()))
    lookup = {s: i for i, s in enumerate(ids)}
    with open(path, "wb") as fh:
        fh.write(HXS_MAGIC)
        fh.write(struct.pack("<IIHHHB", HXS_VERSION, n, N_SEQ, N_FEATURES, samples.horizon, samples.stride))
        for i in range(n):
            fh.write(X[i].tobytes())
            fh.write(struct.pack("<BB", int(samples.y[i]), int(samples.subclass[i])))
        fh.write(struct.pack("<I", len(ids)))
        for s in ids:
            raw = s.encode("utf-8")
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
        for i in range(n):
            fh.write(struct.pack("<IBI", lookup[samples.trial_id[i]], int(samples.focal[i]), int(samples.t_f[i])))
        meta = json.dumps(samples.meta, sort_keys=True).encode("utf-8")
        fh.write(struct.pack("<I", len(meta)))
        fh.write(meta)


def read_hxs(path) -> SampleSet:
    with open(path, "rb") as fh:
        rd = Reader(fh.read(), str(path))
    if rd.take(4) != HXS_MAGIC:
        raise BadMagicError(f"{path}: not a sample file")
    (version,) = rd.unpack("<I")
    if version != HXS_VERSION:
        raise UnsupportedVersionError(f"{path}: sample file version {version} is not supported", version)
    n, n_seq, n_feat, horizon, stride = rd.unpack("<IHHHB")
    if (n_seq, n_feat) != (N_SEQ, N_FEATURES):
        raise UnsupportedVersionError(f"{path}: unsupported window shape {n_seq}x{n_feat}", version)
    rec = np.dtype([("x", "<f8", (n_seq * n_feat,)), ("y", "u1"), ("sub", "u1")])
    body = np.frombuffer(rd.take(n * rec.itemsize), dtype=rec)
    (n_ids,) = rd.unpack("<I")
    ids = []
    for _ in range(n_ids):
        (length,) = rd.unpack("<H")
        ids.append(rd.take(length).decode("utf-8"))
    prov = np.frombuffer(rd.take(n * 9), dtype=np.dtype([("trial", "<u4"), ("focal", "u1"), ("t_f", "<u4")]))
    (meta_len,) = rd.unpack("<I")
    meta = json.loads(rd.take(meta_len).decode("utf-8"))
    if np.any(body["y"] > N_TARGETS) or np.any(body["sub"] > 3) or np.any(prov["trial"] >= max(n_ids, 1)):
        raise BadMagicError(f"{path}: corrupt sample records")
    X = body["x"].reshape(n, n_seq, n_feat).astype(np.float64)
    trial_ids = np.array([ids[i] for i in prov["trial"]], dtype=object)
    return SampleSet(X, body["y"], body["sub"], trial_ids, prov["focal"], prov["t_f"], horizon, stride, meta)
