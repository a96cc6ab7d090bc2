"""Behavioural analytics: inter-target movement times and herding performance measures."""

from __future__ import annotations

import csv
import io
from collections import Counter
from dataclasses import asdict, dataclass, field
from typing import Iterable, Sequence

import numpy as np
from scipy.spatial import ConvexHull, QhullError

from .ingest import N_HERDERS, Trial

HIST_BIN_MS = 40.0


@dataclass
class MovementTimes:
    """Inter-target movement times in milliseconds plus counts of skipped switches."""

    durations_ms: list = field(default_factory=list)
    herder: list = field(default_factory=list)
    diagnostics: Counter = field(default_factory=Counter)

    def __len__(self):
        return len(self.durations_ms)

    def extend(self, other: "MovementTimes") -> None:
        self.durations_ms += other.durations_ms
        self.herder += other.herder
        self.diagnostics.update(other.diagnostics)


def _crossings(dist: np.ndarray, t: np.ndarray, radius: float, inward: bool) -> list[tuple[int, float]]:
    """(frame index, interpolated time) for every crossing of ``radius``.

    Inward crossings go from ``>= radius`` to ``< radius`` with the distance
    shrinking; outward ones the reverse.
    """
    a, b = dist[:-1], dist[1:]
    if inward:
        hit = (a >= radius) & (b < radius)
    else:
        hit = (a < radius) & (b >= radius)
    out = []
    for i in np.flatnonzero(hit):
        frac = (radius - a[i]) / (b[i] - a[i])
        out.append((int(i) + 1, float(t[i] + frac * (t[i + 1] - t[i]))))
    return out


def _runs(labels: np.ndarray):
    """Maximal runs of equal labels as (label, first, last) frame triples."""
    edges = np.flatnonzero(np.diff(labels)) + 1
    starts = np.r_[0, edges]
    ends = np.r_[edges - 1, len(labels) - 1]
    return [(int(labels[s]), int(s), int(e)) for s, e in zip(starts, ends)]


def inter_target_times(trial: Trial, repulsion_radius: float = 0.12) -> MovementTimes:
    """Time from leaving the previous target's radius to entering the next one's, per switch.

    A switch is a change between two different nonzero labels; frames labelled
    0 in between are bridged over, and changes to or from 0 alone are not
    switches. The exit instant is the last outward crossing of the old
    target's radius during or after its labelled run; the entry instant is
    the first inward crossing of the new target's radius after that run ends
    and no later than the end of the new run. Crossing times are linearly
    interpolated between frames. Switches lacking either instant are skipped
    and counted in ``diagnostics``.
    """
    if not trial.is_labeled:
        raise ValueError(f"trial {trial.trial_id} has no labels")
    out = MovementTimes()
    for h in range(N_HERDERS):
        dist = np.linalg.norm(trial.targets - trial.herders[:, h:h + 1, :], axis=2)
        runs = [r for r in _runs(trial.labels[:, h]) if r[0] != 0]
        for (a, a_first, a_last), (b, _b_first, b_last) in zip(runs, runs[1:]):
            if a == b:
                continue
            entries = [c for c in _crossings(dist[:, b - 1], trial.t, repulsion_radius, inward=True)
                       if a_last < c[0] <= b_last]
            if not entries:
                out.diagnostics["no_entry"] += 1
                continue
            entry_idx, entry_t = entries[0]
            exits = [c for c in _crossings(dist[:, a - 1], trial.t, repulsion_radius, inward=False)
                     if a_first < c[0] <= entry_idx]
            if not exits:
                out.diagnostics["no_exit"] += 1
                continue
            out.durations_ms.append(1000.0 * (entry_t - exits[-1][1]))
            out.herder.append(h)
    return out


def movement_time_histogram(durations_ms: Sequence[float], bin_ms: float = HIST_BIN_MS):
    """Counts per ``bin_ms``-wide bin, starting at the floor of the smallest duration."""
    d = np.asarray(durations_ms, dtype=np.float64)
    if d.size == 0:
        return np.empty(0), np.empty(0, dtype=np.int64)
    lo = np.floor(d.min() / bin_ms) * bin_ms
    hi = max(lo + bin_ms, np.floor(d.max() / bin_ms) * bin_ms + bin_ms)
    edges = np.arange(lo, hi + bin_ms / 2, bin_ms)
    counts, edges = np.histogram(d, bins=edges)
    return edges, counts


def histogram_csv(groups: dict) -> str:
    """One row per (group, bin) for ``{name: durations_ms}``."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["group", "bin_start_ms", "bin_end_ms", "count"])
    for name, durations in groups.items():
        edges, counts = movement_time_histogram(durations)
        for lo, hi, c in zip(edges[:-1], edges[1:], counts):
            w.writerow([name, f"{lo:.0f}", f"{hi:.0f}", int(c)])
    return buf.getvalue()


@dataclass
class HerdingMeasures:
    t_g: float
    d_g: float
    D_g: float
    S_g: float
    S_g_pct: float
    I_pct: float


def hull_area(points: np.ndarray) -> float:
    """Convex-hull area of 2-D points; 0 for degenerate (collinear or coincident) sets."""
    pts = np.asarray(points, dtype=np.float64)
    if len(pts) < 3:
        return 0.0
    try:
        return float(ConvexHull(pts).volume)
    except QhullError:
        return 0.0


def gathering_index(trial: Trial, containment_radius: float = 0.3, center=(0.0, 0.0)) -> int:
    """Index of the first frame with every target strictly inside the containment radius; last frame if none."""
    radial = np.linalg.norm(trial.targets - np.asarray(center), axis=2)
    inside = np.all(radial < containment_radius, axis=1)
    hits = np.flatnonzero(inside)
    return int(hits[0]) if hits.size else trial.n_frames - 1


def herding_measures(trial: Trial, containment_radius: float = 0.3, center=(0.0, 0.0)) -> HerdingMeasures:
    """Gathering time, herder path length, herd distance, herd spread and containment rate.

    Every time-mean runs over the frames up to and including the gathering
    frame (the final frame when the herd is never gathered).
    """
    if trial.n_frames < 1:
        raise ValueError("trial has no frames")
    g = gathering_index(trial, containment_radius, center)
    t_g = float(trial.t[g] - trial.t[0])
    herders = trial.herders[:g + 1]
    targets = trial.targets[:g + 1]
    steps = np.linalg.norm(np.diff(herders, axis=0), axis=2)  # (g, 2)
    d_g = float(steps.sum(axis=0).mean()) if g > 0 else 0.0
    radial = np.linalg.norm(targets - np.asarray(center), axis=2)
    D_g = float(radial.mean(axis=1).mean())
    S_g = float(np.mean([hull_area(p) for p in targets]))
    area = np.pi * containment_radius ** 2
    I_pct = float((radial < containment_radius).mean(axis=1).mean() * 100.0)
    return HerdingMeasures(t_g, d_g, D_g, S_g, S_g / area * 100.0, I_pct)


def measures_csv(trials: Iterable[Trial], containment_radius: float = 0.3, center=(0.0, 0.0)) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    names = list(HerdingMeasures.__dataclass_fields__)
    w.writerow(["trial_id", "expertise", "success", *names])
    for tr in trials:
        m = asdict(herding_measures(tr, containment_radius, center))
        w.writerow([tr.trial_id, tr.expertise, int(tr.success), *(f"{m[n]:.6f}" for n in names)])
    return buf.getvalue()


def batch_movement_times(trials: Iterable[Trial], repulsion_radius: float = 0.12) -> dict:
    """Movement times pooled per expertise."""
    out: dict = {}
    for tr in trials:
        out.setdefault(tr.expertise, MovementTimes()).extend(inter_target_times(tr, repulsion_radius))
    return out
