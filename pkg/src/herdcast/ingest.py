"""Trial recordings: in-memory representation, JSON-lines codec and auto-labelling.

A trial file holds one JSON object per line::

    {"trial_id": "...", "expertise": "expert", "hz": 50.0, "success": true,
     "frames": [{"t": 0.0,
                 "herders": [{"x": .., "y": .., "vx": .., "vy": ..}, {...}],
                 "targets": [{"x": .., "y": ..}, ...4],
                 "labels": [l1, l2]}, ...]}

Velocities and labels are optional. Coordinates are metres, ``t`` seconds.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional

import numpy as np

N_HERDERS = 2
N_TARGETS = 4
EXPERTISE = ("expert", "novice")


class TrialFormatError(ValueError):
    """Raised for malformed or inconsistent trial records."""


@dataclass(frozen=True)
class Frame:
    t: float
    herders: np.ndarray  # (2, 2)
    targets: np.ndarray  # (4, 2)
    herder_vel: Optional[np.ndarray] = None
    target_vel: Optional[np.ndarray] = None
    labels: Optional[tuple[int, int]] = None


@dataclass(eq=False)
class Trial:
    """One herding episode sampled at ``hz``.

    Positions are stored as arrays of shape ``(n_frames, n_agents, 2)``;
    ``labels`` has shape ``(n_frames, 2)`` with one column per herder.
    """

    trial_id: str
    expertise: str
    hz: float
    success: bool
    t: np.ndarray
    herders: np.ndarray
    targets: np.ndarray
    herder_vel: Optional[np.ndarray] = None
    target_vel: Optional[np.ndarray] = None
    labels: Optional[np.ndarray] = None
    seed: Optional[int] = field(default=None, compare=False)

    def __post_init__(self):
        self.t = np.asarray(self.t, dtype=np.float64)
        self.herders = np.asarray(self.herders, dtype=np.float64)
        self.targets = np.asarray(self.targets, dtype=np.float64)
        if self.herder_vel is not None:
            self.herder_vel = np.asarray(self.herder_vel, dtype=np.float64)
        if self.target_vel is not None:
            self.target_vel = np.asarray(self.target_vel, dtype=np.float64)
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)

    _ARRAYS = ("t", "herders", "targets", "herder_vel", "target_vel", "labels")

    def __eq__(self, other) -> bool:
        # exact comparison, array fields included; the seed is bookkeeping only
        if not isinstance(other, Trial):
            return NotImplemented
        if (self.trial_id, self.expertise, self.hz, self.success) != (
                other.trial_id, other.expertise, other.hz, other.success):
            return False
        for name in self._ARRAYS:
            a, b = getattr(self, name), getattr(other, name)
            if (a is None) != (b is None) or (a is not None and not np.array_equal(a, b)):
                return False
        return True

    @property
    def n_frames(self) -> int:
        return len(self.t)

    @property
    def duration(self) -> float:
        return float(self.t[-1] - self.t[0]) if self.n_frames else 0.0

    @property
    def is_labeled(self) -> bool:
        return self.labels is not None

    @property
    def has_velocities(self) -> bool:
        return self.herder_vel is not None and self.target_vel is not None

    @property
    def frames(self) -> list[Frame]:
        out = []
        for i in range(self.n_frames):
            out.append(Frame(
                t=float(self.t[i]),
                herders=self.herders[i],
                targets=self.targets[i],
                herder_vel=None if self.herder_vel is None else self.herder_vel[i],
                target_vel=None if self.target_vel is None else self.target_vel[i],
                labels=None if self.labels is None else (int(self.labels[i, 0]), int(self.labels[i, 1])),
            ))
        return out

    def validate(self) -> None:
        n = self.n_frames
        if self.expertise not in EXPERTISE:
            raise TrialFormatError(f"trial {self.trial_id}: unknown expertise {self.expertise!r}")
        if not self.hz > 0:
            raise TrialFormatError(f"trial {self.trial_id}: hz must be positive")
        if self.herders.shape != (n, N_HERDERS, 2) or self.targets.shape != (n, N_TARGETS, 2):
            raise TrialFormatError(f"trial {self.trial_id}: position arrays have wrong shape")
        if n > 1:
            steps = np.diff(self.t)
            if np.any(steps <= 0):
                raise TrialFormatError(f"trial {self.trial_id}: timestamps are not strictly increasing")
            if np.max(np.abs(steps - 1.0 / self.hz)) > 1e-9:
                raise TrialFormatError(f"trial {self.trial_id}: frame spacing differs from 1/hz")
        for name in ("herders", "targets", "herder_vel", "target_vel"):
            arr = getattr(self, name)
            if arr is not None and not np.all(np.isfinite(arr)):
                raise TrialFormatError(f"trial {self.trial_id}: non-finite {name}")
        if self.labels is not None:
            if self.labels.shape != (n, N_HERDERS):
                raise TrialFormatError(f"trial {self.trial_id}: labels have wrong shape")
            if np.any((self.labels < 0) | (self.labels > N_TARGETS)):
                raise TrialFormatError(f"trial {self.trial_id}: labels outside 0..{N_TARGETS}")

    def with_labels(self, labels: np.ndarray) -> "Trial":
        return Trial(self.trial_id, self.expertise, self.hz, self.success, self.t, self.herders,
                     self.targets, self.herder_vel, self.target_vel, np.asarray(labels), self.seed)

    def truncated(self, n_frames: int) -> "Trial":
        def cut(a):
            return None if a is None else a[:n_frames]
        return Trial(self.trial_id, self.expertise, self.hz, self.success, self.t[:n_frames],
                     self.herders[:n_frames], self.targets[:n_frames], cut(self.herder_vel),
                     cut(self.target_vel), cut(self.labels), self.seed)


def _agent_records(pos, vel):
    recs = []
    for k in range(len(pos)):
        rec = {"x": float(pos[k, 0]), "y": float(pos[k, 1])}
        if vel is not None:
            rec["vx"] = float(vel[k, 0])
            rec["vy"] = float(vel[k, 1])
        recs.append(rec)
    return recs


def trial_to_dict(trial: Trial) -> dict:
    frames = []
    for i in range(trial.n_frames):
        fr = {
            "t": float(trial.t[i]),
            "herders": _agent_records(trial.herders[i], None if trial.herder_vel is None else trial.herder_vel[i]),
            "targets": _agent_records(trial.targets[i], None if trial.target_vel is None else trial.target_vel[i]),
        }
        if trial.labels is not None:
            fr["labels"] = [int(trial.labels[i, 0]), int(trial.labels[i, 1])]
        frames.append(fr)
    return {
        "trial_id": trial.trial_id,
        "expertise": trial.expertise,
        "hz": float(trial.hz),
        "success": bool(trial.success),
        "frames": frames,
    }


def _parse_agents(recs, count, what, trial_id, lineno, frame_idx):
    if not isinstance(recs, list) or len(recs) != count:
        raise TrialFormatError(
            f"line {lineno}: trial {trial_id} frame {frame_idx}: expected {count} {what}, "
            f"got {len(recs) if isinstance(recs, list) else type(recs).__name__}")
    pos = np.empty((count, 2))
    vel = np.empty((count, 2))
    has_vel = True
    for k, rec in enumerate(recs):
        try:
            pos[k] = (float(rec["x"]), float(rec["y"]))
        except (KeyError, TypeError, ValueError) as exc:
            raise TrialFormatError(
                f"line {lineno}: trial {trial_id} frame {frame_idx}: {what}[{k}] has no valid position") from exc
        if "vx" in rec and "vy" in rec:
            vel[k] = (float(rec["vx"]), float(rec["vy"]))
        else:
            has_vel = False
    return pos, (vel if has_vel else None)


def trial_from_dict(obj: dict, lineno: int = 0) -> Trial:
    try:
        trial_id = str(obj["trial_id"])
        expertise = obj["expertise"]
        hz = float(obj["hz"])
        success = bool(obj["success"])
        frames = obj["frames"]
    except (KeyError, TypeError, ValueError) as exc:
        raise TrialFormatError(f"line {lineno}: missing or invalid trial field: {exc}") from exc
    n = len(frames)
    t = np.empty(n)
    herders = np.empty((n, N_HERDERS, 2))
    targets = np.empty((n, N_TARGETS, 2))
    hv = np.empty((n, N_HERDERS, 2))
    tv = np.empty((n, N_TARGETS, 2))
    labels = np.empty((n, N_HERDERS), dtype=np.int64)
    have_hv = have_tv = have_labels = n > 0
    for i, fr in enumerate(frames):
        try:
            t[i] = float(fr["t"])
        except (KeyError, TypeError, ValueError) as exc:
            raise TrialFormatError(f"line {lineno}: trial {trial_id} frame {i}: missing timestamp") from exc
        herders[i], v = _parse_agents(fr.get("herders"), N_HERDERS, "herders", trial_id, lineno, i)
        if v is None:
            have_hv = False
        else:
            hv[i] = v
        targets[i], v = _parse_agents(fr.get("targets"), N_TARGETS, "targets", trial_id, lineno, i)
        if v is None:
            have_tv = False
        else:
            tv[i] = v
        lab = fr.get("labels")
        if lab is None:
            have_labels = False
        else:
            if len(lab) != N_HERDERS:
                raise TrialFormatError(f"line {lineno}: trial {trial_id} frame {i}: expected 2 labels")
            labels[i] = lab
    trial = Trial(trial_id, expertise, hz, success, t, herders, targets,
                  hv if have_hv else None, tv if have_tv else None, labels if have_labels else None)
    try:
        trial.validate()
    except TrialFormatError as exc:
        raise TrialFormatError(f"line {lineno}: {exc}") from None
    return trial


def write_trials(trials: Iterable[Trial], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for trial in trials:
            fh.write(json.dumps(trial_to_dict(trial), separators=(",", ":")))
            fh.write("\n")


def read_trials(path) -> list[Trial]:
    """Read every trial in a JSON-lines file, preserving order."""
    trials = []
    with open(Path(path), encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise TrialFormatError(f"line {lineno}: not valid JSON ({exc.msg})") from None
            trials.append(trial_from_dict(obj, lineno))
    return trials


def _closing(dist: np.ndarray, hz: float) -> np.ndarray:
    # central differences inside, one-sided at both ends
    return np.gradient(dist, 1.0 / hz, axis=0) < 0


def auto_label(trial: Trial, repulsion_radius: float = 0.12) -> Trial:
    """Label each frame with the target a herder is actively approaching.

    A target qualifies when it lies inside ``repulsion_radius`` of the herder
    and their distance is shrinking; the nearest qualifying target wins, and
    frames with no qualifying target get label 0.
    """
    if trial.n_frames < 3:
        raise TrialFormatError(f"trial {trial.trial_id}: auto_label needs at least 3 frames")
    labels = np.zeros((trial.n_frames, N_HERDERS), dtype=np.int64)
    for h in range(N_HERDERS):
        dist = np.linalg.norm(trial.targets - trial.herders[:, h:h + 1, :], axis=2)
        ok = (dist < repulsion_radius) & _closing(dist, trial.hz)
        masked = np.where(ok, dist, np.inf)
        best = np.argmin(masked, axis=1)
        labels[:, h] = np.where(np.isfinite(masked[np.arange(trial.n_frames), best]), best + 1, 0)
    return trial.with_labels(labels)

