"""Shapley attributions over whole feature channels, global rankings and Kendall's tau.

A coalition keeps some channels of the explained window ``x`` (all
timesteps) and fills every other channel from a background window; the
coalition's value is the mean class probability over the background set.
"""

from __future__ import annotations

import csv
import io
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence, Union

import numpy as np
from scipy.special import erfc
from sklearn.base import BaseEstimator

from .nn import LstmModel, predict_proba

MAX_EXACT_GROUPS = 15
PREDICT_BATCH = 512


def _lstm_predict(model: LstmModel, X: np.ndarray) -> np.ndarray:
    # BLAS kernels differ between full and partial batches, so the same window
    # could score differently by an ulp depending on its position; padding
    # every call to whole batches makes each row's output position-independent
    n = len(X)
    pad = -n % PREDICT_BATCH
    if pad:
        X = np.concatenate([X, np.repeat(X[-1:], pad, axis=0)])
    return predict_proba(model, X, PREDICT_BATCH)[:n]


def as_predict_fn(model) -> Callable[[np.ndarray], np.ndarray]:
    """Turn an LstmModel, fitted classifier or callable into ``f(X) -> (n, C)`` probabilities."""
    if isinstance(model, LstmModel):
        if model.mean is None:
            return lambda X: _lstm_predict(model, X)
        mean, scale = model.mean, model.scale
        return lambda X: _lstm_predict(model, (X - mean) / scale)
    if hasattr(model, "predict_proba"):
        return model.predict_proba
    if callable(model):
        return model
    raise TypeError(f"cannot explain object of type {type(model).__name__}")


def _groups(groups, n_channels: int) -> list[np.ndarray]:
    if groups is None:
        return [np.array([c]) for c in range(n_channels)]
    out = [np.atleast_1d(np.asarray(g, dtype=np.int64)) for g in groups]
    flat = np.concatenate(out) if out else np.empty(0, dtype=np.int64)
    if np.any((flat < 0) | (flat >= n_channels)) or len(set(flat.tolist())) != len(flat):
        raise ValueError("groups must be disjoint subsets of the channel indices")
    return out


def _hybrids(x: np.ndarray, background: np.ndarray, keep_masks: np.ndarray) -> np.ndarray:
    """Windows for every (coalition, background) pair: shape (n_coalitions * n_bg, T, F)."""
    keep = keep_masks[:, None, None, :]  # (S, 1, 1, F)
    return np.where(keep, x[None, None], background[None]).reshape(-1, *x.shape)


def coalition_values(f, x, background, keep_masks, batch: int = 4096) -> np.ndarray:
    """Mean model output over the background for each channel mask; shape (n_masks, C)."""
    x = np.asarray(x, dtype=np.float64)
    background = np.asarray(background, dtype=np.float64)
    if len(background) == 0:
        raise ValueError("background set is empty")
    keep_masks = np.atleast_2d(np.asarray(keep_masks, dtype=bool))
    nb = len(background)
    per = max(1, batch // nb)
    out = []
    for lo in range(0, len(keep_masks), per):
        probs = np.asarray(f(_hybrids(x, background, keep_masks[lo:lo + per])))
        out.append(probs.reshape(-1, nb, probs.shape[-1]).mean(axis=1))
    return np.concatenate(out)


def value_function(model, x, coalition, background, k: Optional[int] = None):
    """Value of the channel set ``coalition`` for class ``k`` (all classes when ``k`` is None)."""
    f = as_predict_fn(model)
    x = np.asarray(x, dtype=np.float64)
    mask = np.zeros(x.shape[-1], dtype=bool)
    mask[np.asarray(sorted(coalition), dtype=np.int64)] = True
    vals = coalition_values(f, x, background, mask[None])[0]
    return vals if k is None else float(vals[k])


def _masks_from_groups(groups, subsets_bits: np.ndarray, n_channels: int) -> np.ndarray:
    masks = np.zeros((len(subsets_bits), n_channels), dtype=bool)
    for g, chans in enumerate(groups):
        masks[:, chans] |= ((subsets_bits >> g) & 1).astype(bool)[:, None]
    return masks


def shapley_exact(model, x, background, k: Optional[int] = None, groups=None) -> np.ndarray:
    """Exact Shapley values per group by enumerating all 2^d coalitions.

    Returns shape ``(d,)`` for one class or ``(d, C)`` when ``k`` is None.
    """
    x = np.asarray(x, dtype=np.float64)
    groups = _groups(groups, x.shape[-1])
    d = len(groups)
    if d > MAX_EXACT_GROUPS:
        raise ValueError(f"{d} groups is too many for exact enumeration (max {MAX_EXACT_GROUPS}); "
                         "use shapley_sample instead")
    f = as_predict_fn(model)
    bits = np.arange(2 ** d, dtype=np.int64)
    values = coalition_values(f, x, background, _masks_from_groups(groups, bits, x.shape[-1]))
    size = np.array([bin(b).count("1") for b in bits])
    weight = np.array([math.factorial(s) * math.factorial(d - s - 1) / math.factorial(d) for s in range(d)])
    phi = np.zeros((d, values.shape[1]))
    for g in range(d):
        without = bits[(bits >> g) & 1 == 0]
        phi[g] = (weight[size[without]][:, None] * (values[without | (1 << g)] - values[without])).sum(axis=0)
    return phi if k is None else phi[:, k]


@dataclass
class SampledShapley:
    phi: np.ndarray      # (d, C)
    stderr: np.ndarray   # (d, C)
    n_perm: int

    def for_class(self, k: int):
        return self.phi[:, k], self.stderr[:, k]


def shapley_sample(model, x, background, k: Optional[int] = None, n_perm: int = 200, seed: int = 0,
                   groups=None):
    """Antithetic permutation-sampling Shapley estimate with per-group standard errors.

    Permutations come in (pi, reversed pi) pairs; an odd ``n_perm`` is rounded
    up. The standard error treats each pair's mean marginal contribution as one
    independent draw. Returns ``(phi, stderr)`` for class ``k``, or a
    SampledShapley covering every class when ``k`` is None.
    """
    if n_perm < 2:
        raise ValueError("n_perm must be at least 2")
    x = np.asarray(x, dtype=np.float64)
    groups = _groups(groups, x.shape[-1])
    d = len(groups)
    f = as_predict_fn(model)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5A9]))
    n_pairs = (n_perm + 1) // 2
    perms = []
    for _ in range(n_pairs):
        p = rng.permutation(d)
        perms += [p, p[::-1]]
    # prefix masks of every permutation: row j of block i keeps the first j groups of perm i
    bits = []
    for p in perms:
        acc = 0
        row = [0]
        for g in p:
            acc |= 1 << int(g)
            row.append(acc)
        bits.append(row)
    bits = np.array(bits, dtype=np.int64)
    uniq, inverse = np.unique(bits.reshape(-1), return_inverse=True)
    values = coalition_values(f, x, background, _masks_from_groups(groups, uniq, x.shape[-1]))
    v = values[inverse].reshape(len(perms), d + 1, -1)
    contrib = np.empty((len(perms), d, v.shape[-1]))
    marg = v[:, 1:] - v[:, :-1]
    for i, p in enumerate(perms):
        contrib[i, p] = marg[i]
    pair_means = 0.5 * (contrib[0::2] + contrib[1::2])
    phi = pair_means.mean(axis=0)
    se = pair_means.std(axis=0, ddof=1) / math.sqrt(n_pairs) if n_pairs > 1 else np.full_like(phi, np.nan)
    if k is None:
        return SampledShapley(phi, se, 2 * n_pairs)
    return phi[:, k], se[:, k]


def global_ranking(shap_values, k: int):
    """Mean |phi| per channel for class ``k`` and the channels sorted by it (ties: lower index first).

    ``shap_values`` has shape ``(n_samples, n_classes, n_channels)``.
    """
    sv = np.asarray(shap_values, dtype=np.float64)
    if sv.ndim != 3 or len(sv) == 0:
        raise ValueError("expected a non-empty (samples, classes, channels) array")
    importance = np.abs(sv[:, k, :]).mean(axis=0)
    ranking = np.argsort(-importance, kind="stable")
    return importance, ranking


def signed_importance(shap_values, k: int) -> np.ndarray:
    return np.asarray(shap_values, dtype=np.float64)[:, k, :].mean(axis=0)


def ranks_from_order(order) -> np.ndarray:
    """Convert a best-first ordering of items into 1-based rank per item."""
    order = np.asarray(order, dtype=np.int64)
    ranks = np.empty(len(order), dtype=np.int64)
    ranks[order] = np.arange(1, len(order) + 1)
    return ranks


@dataclass
class RankComparison:
    tau: float
    p_value: float
    depth: Union[int, str]
    n_items: int


def _tie_sums(x: np.ndarray):
    _, counts = np.unique(x, return_counts=True)
    t = counts[counts > 1].astype(np.float64)
    return (t * (t - 1)).sum() / 2, (t * (t - 1) * (t - 2)).sum(), (t * (t - 1) * (2 * t + 5)).sum()


def _tau_b(a: np.ndarray, b: np.ndarray):
    n = len(a)
    i, j = np.triu_indices(n, k=1)
    s = np.sign(a[i] - a[j]) * np.sign(b[i] - b[j])
    con_minus_dis = float(s.sum())
    n0 = n * (n - 1) / 2
    tx, x0, x1 = _tie_sums(a)
    ty, y0, y1 = _tie_sums(b)
    denom = math.sqrt((n0 - tx) * (n0 - ty))
    if denom == 0:
        return float("nan"), float("nan")
    tau = min(1.0, max(-1.0, con_minus_dis / denom))
    m = n * (n - 1.0)
    var = (m * (2 * n + 5) - x1 - y1) / 18.0 + 2.0 * tx * ty / m
    if n > 2:
        var += x0 * y0 / (9.0 * m * (n - 2))
    p = float(erfc(abs(con_minus_dis) / math.sqrt(var) / math.sqrt(2.0))) if var > 0 else 1.0
    return tau, min(1.0, max(0.0, p))


def kendall_tau(rank_a, rank_b, depth: Union[int, str] = "all", restrict: str = "union") -> RankComparison:
    """Kendall's tau-b between two per-item rank (or score) vectors.

    ``rank_a[i]`` and ``rank_b[i]`` are item ``i``'s ranks (1 = most
    important). For an integer ``depth`` only items inside the top ``depth``
    of either list (``restrict="union"``) or of the first list
    (``restrict="first"``) are compared, each still scored by its full-list
    rank. The p-value is two-sided from the normal approximation with
    tie-corrected variance. A constant input gives ``tau = 0, p = 1``.
    """
    a = np.asarray(rank_a, dtype=np.float64)
    b = np.asarray(rank_b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError("rank vectors must be one-dimensional and equally long")
    if depth != "all":
        depth = int(depth)
        if restrict == "union":
            keep = (a <= depth) | (b <= depth)
        elif restrict == "first":
            keep = a <= depth
        else:
            raise ValueError("restrict must be 'union' or 'first'")
        a, b = a[keep], b[keep]
    if len(a) < 2:
        raise ValueError("need at least 2 items to compare rankings")
    tau, p = _tau_b(a, b)
    if math.isnan(tau):
        tau, p = 0.0, 1.0
    return RankComparison(tau, p, depth, len(a))


@dataclass
class ShapReport:
    """Attributions for a batch of explained windows: ``values`` is (samples, classes, channels)."""

    values: np.ndarray
    stderr: np.ndarray
    sample_ids: list
    background_id: str = ""
    feature_names: Optional[list] = None
    meta: dict = field(default_factory=dict)

    @property
    def n_classes(self) -> int:
        return self.values.shape[1]

    def importance(self, k: int):
        return global_ranking(self.values, k)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["sample_id", "class", "channel", "phi", "stderr"])
        for s, sid in enumerate(self.sample_ids):
            for c in range(self.values.shape[1]):
                for ch in range(self.values.shape[2]):
                    w.writerow([sid, c, ch, repr(float(self.values[s, c, ch])), repr(float(self.stderr[s, c, ch]))])
        return buf.getvalue()

    def top_table(self, top: int = 10) -> str:
        """Top-``top`` channels per class with their mean |phi|, one column pair per class."""
        names = self.feature_names or [str(i) for i in range(self.values.shape[2])]
        cols = [self.importance(k) for k in range(self.n_classes)]
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        header = ["rank"]
        for k in range(self.n_classes):
            header += [f"class{k}_feature", f"class{k}_mean_abs_phi"]
        w.writerow(header)
        for r in range(min(top, self.values.shape[2])):
            row = [r + 1]
            for imp, order in cols:
                row += [names[order[r]], f"{imp[order[r]]:.6f}"]
            w.writerow(row)
        return buf.getvalue()


def read_shap_csv(path_or_text) -> ShapReport:
    """Parse the per-value CSV written by :meth:`ShapReport.to_csv` (``#`` lines are skipped)."""
    text = str(path_or_text)
    if "\n" not in text:
        with open(text, encoding="utf-8") as fh:
            text = fh.read()
    rows = [r for r in csv.reader(line for line in text.splitlines() if line and not line.startswith("#"))]
    if not rows or rows[0] != ["sample_id", "class", "channel", "phi", "stderr"]:
        raise ValueError("not a Shapley value table")
    body = rows[1:]
    ids = list(dict.fromkeys(r[0] for r in body))
    n_cls = 1 + max(int(r[1]) for r in body)
    n_ch = 1 + max(int(r[2]) for r in body)
    pos = {s: i for i, s in enumerate(ids)}
    values = np.zeros((len(ids), n_cls, n_ch))
    stderr = np.zeros_like(values)
    for sid, c, ch, phi, se in body:
        values[pos[sid], int(c), int(ch)] = float(phi)
        stderr[pos[sid], int(c), int(ch)] = float(se)
    return ShapReport(values, stderr, ids)


def _explain_one(args):
    f, x, background, n_perm, seed, groups = args
    res = shapley_sample(f, x, background, None, n_perm, seed, groups)
    return res.phi.T, res.stderr.T


def unit_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, index, 0xE4]).generate_state(1, np.uint32)[0])


def explain_samples(model, X, background, n_perm: int = 200, seed: int = 0, groups=None,
                    sample_ids: Optional[Sequence] = None, n_jobs: int = 1) -> ShapReport:
    """Sampled Shapley values for every window in ``X``.

    Each window gets its own seed derived from ``(seed, index)``, so results do
    not depend on ``n_jobs``.
    """
    X = np.asarray(X, dtype=np.float64)
    model = model.model_ if hasattr(model, "model_") else model
    jobs = [(model, X[i], background, n_perm, unit_seed(seed, i), groups) for i in range(len(X))]
    if n_jobs > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=n_jobs) as pool:
            results = list(pool.map(_explain_one, jobs))
    else:
        results = [_explain_one(j) for j in jobs]
    values = np.stack([r[0] for r in results]) if results else np.empty((0, 0, 0))
    stderr = np.stack([r[1] for r in results]) if results else np.empty((0, 0, 0))
    return ShapReport(values, stderr, list(sample_ids) if sample_ids is not None else list(range(len(X))))


def compare_rankings(report_a: ShapReport, report_b: ShapReport, depths=("all", 10, 5),
                     restrict: str = "union") -> list[tuple[int, RankComparison]]:
    """Kendall's tau between two reports' per-class rankings at several depths."""
    out = []
    for k in range(report_a.n_classes):
        ra = ranks_from_order(report_a.importance(k)[1])
        rb = ranks_from_order(report_b.importance(k)[1])
        for depth in depths:
            out.append((k, kendall_tau(ra, rb, depth, restrict)))
    return out


def rank_comparison_csv(rows: Sequence[tuple[int, RankComparison]]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["class", "depth", "n_items", "tau", "p_value"])
    for k, rc in rows:
        w.writerow([k, rc.depth, rc.n_items, f"{rc.tau:.6f}", f"{rc.p_value:.6f}"])
    return buf.getvalue()


class ShapleyExplainer(BaseEstimator):
    """Background-set Shapley explainer for any model with ``predict_proba``.

    ``fit`` stores a random subset of ``background_size`` windows;
    ``explain`` returns a ShapReport for the given windows.
    """

    def __init__(self, model=None, background_size=200, n_perm=200, method="sample", groups=None,
                 random_state=0, n_jobs=1):
        self.model = model
        self.background_size = background_size
        self.n_perm = n_perm
        self.method = method
        self.groups = groups
        self.random_state = random_state
        self.n_jobs = n_jobs

    def fit(self, X, y=None):
        X = np.asarray(X, dtype=np.float64)
        rng = np.random.default_rng(np.random.SeedSequence([self.random_state, 0xB6]))
        n = min(self.background_size, len(X))
        self.background_ = X[np.sort(rng.choice(len(X), n, replace=False))]
        return self

    def explain(self, X, sample_ids=None) -> ShapReport:
        X = np.asarray(X, dtype=np.float64)
        if self.method == "exact":
            f = as_predict_fn(self.model.model_ if hasattr(self.model, "model_") else self.model)
            values = np.stack([shapley_exact(f, x, self.background_, None, self.groups).T for x in X])
            return ShapReport(values, np.zeros_like(values), list(sample_ids) if sample_ids is not None
                              else list(range(len(X))))
        return explain_samples(self.model, X, self.background_, self.n_perm, self.random_state, self.groups,
                               sample_ids, self.n_jobs)

    def transform(self, X):
        return self.explain(X).values
