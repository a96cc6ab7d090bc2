"""The 48 focal-herder state variables and the ``.hxf`` feature-matrix file.

Layout (focal-herder relative, targets in ID order 1..4)::

    0-1    herder-to-herder distance, bearing
    2-9    (distance, bearing) from focal herder to each target
    10-17  (distance, bearing) from co-herder to each target
    18-21  focal, co-herder (distance, bearing) from the containment centre
    22-29  targets (distance, bearing) from the centre
    30-33  focal, co-herder radial velocity and radial acceleration
    34-41  targets radial velocity and radial acceleration
    42-47  direction of motion: focal, co-herder, targets
"""

from __future__ import annotations

import struct

import numpy as np

from .formats import BadMagicError, Reader, UnsupportedVersionError
from .ingest import N_TARGETS, Trial

N_FEATURES = 48
SPEED_EPS = 1e-9
HXF_MAGIC = b"HXF1"
HXF_VERSION = 1


def _names() -> list[str]:
    names = ["hh_dist", "hh_bearing"]
    for who in ("focal", "co"):
        for i in range(1, N_TARGETS + 1):
            names += [f"{who}_t{i}_dist", f"{who}_t{i}_bearing"]
    for who in ("focal", "co", "t1", "t2", "t3", "t4"):
        names += [f"{who}_center_dist", f"{who}_center_bearing"]
    for who in ("focal", "co", "t1", "t2", "t3", "t4"):
        names += [f"{who}_rvel", f"{who}_racc"]
    names += [f"{who}_heading" for who in ("focal", "co", "t1", "t2", "t3", "t4")]
    return names


FEATURE_NAMES = _names()
assert len(FEATURE_NAMES) == N_FEATURES == 2 + 16 + 12 + 12 + 6


def wrap_angle(theta):
    """Map angles into (-pi, pi]."""
    theta = np.asarray(theta, dtype=np.float64)
    out = np.arctan2(np.sin(theta), np.cos(theta))
    return np.where(out <= -np.pi, np.pi, out)


def _bearing(dx, dy):
    ang = np.arctan2(dy, dx)
    return np.where(ang <= -np.pi, np.pi, ang)


def polar_offset(a, b):
    """Distance and world-frame bearing of ``b`` seen from ``a``.

    Works elementwise on arrays whose last axis holds (x, y). The bearing is
    0 when the two points coincide.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    d = b - a
    dist = np.hypot(d[..., 0], d[..., 1])
    ang = np.where(dist > 0, _bearing(d[..., 0], d[..., 1]), 0.0)
    if dist.ndim == 0:
        return float(dist), float(ang)
    return dist, ang


def _first_difference(r: np.ndarray, h: float) -> np.ndarray:
    # second-order accurate everywhere; written in differences so constant input gives exact zeros
    d = np.empty_like(r)
    d[1:-1] = (r[2:] - r[:-2]) / (2.0 * h)
    d[0] = (4.0 * (r[1] - r[0]) - (r[2] - r[0])) / (2.0 * h)
    d[-1] = ((r[-3] - r[-1]) - 4.0 * (r[-2] - r[-1])) / (2.0 * h)
    return d


def _second_difference(r: np.ndarray, h: float) -> np.ndarray:
    acc = np.empty_like(r)
    acc[1:-1] = (r[2:] - 2.0 * r[1:-1] + r[:-2]) / h ** 2
    acc[0] = (r[0] - 2.0 * r[1] + r[2]) / h ** 2
    acc[-1] = (r[-1] - 2.0 * r[-2] + r[-3]) / h ** 2
    return acc


def kinematics_series(positions, hz: float, center=(0.0, 0.0), velocities=None):
    """Radial velocity, radial acceleration and heading of one or more agents.

    ``positions`` has shape ``(n_frames, 2)`` or ``(n_frames, n_agents, 2)``.
    Radial quantities are derivatives of the distance to ``center``. The
    heading comes from ``velocities`` when given, otherwise from central
    differences of the positions, and is 0 while the agent is stationary.
    """
    pos = np.asarray(positions, dtype=np.float64)
    if pos.shape[0] < 3:
        raise ValueError("kinematics need at least 3 frames")
    h = 1.0 / hz
    r = np.linalg.norm(pos - np.asarray(center, dtype=np.float64), axis=-1)
    rdot = _first_difference(r, h)
    rddot = _second_difference(r, h)
    vel = np.gradient(pos, h, axis=0) if velocities is None else np.asarray(velocities, dtype=np.float64)
    speed = np.hypot(vel[..., 0], vel[..., 1])
    heading = np.where(speed >= SPEED_EPS, _bearing(vel[..., 0], vel[..., 1]), 0.0)
    return rdot, rddot, heading


def trial_features(trial: Trial, focal: int, center=(0.0, 0.0)) -> np.ndarray:
    """All 48 state variables for every frame of ``trial``; shape ``(n_frames, 48)``."""
    if focal not in (0, 1):
        raise ValueError("focal must be 0 or 1")
    n = trial.n_frames
    center = np.asarray(center, dtype=np.float64)
    me = trial.herders[:, focal]
    co = trial.herders[:, 1 - focal]
    tg = trial.targets
    out = np.empty((n, N_FEATURES))

    out[:, 0], out[:, 1] = polar_offset(me, co)
    d, a = polar_offset(me[:, None, :], tg)
    out[:, 2:10:2], out[:, 3:10:2] = d, a
    d, a = polar_offset(co[:, None, :], tg)
    out[:, 10:18:2], out[:, 11:18:2] = d, a
    out[:, 18], out[:, 19] = polar_offset(center, me)
    out[:, 20], out[:, 21] = polar_offset(center, co)
    d, a = polar_offset(center, tg)
    out[:, 22:30:2], out[:, 23:30:2] = d, a

    hv = trial.herder_vel
    rd, rdd, head = kinematics_series(trial.herders, trial.hz, center, hv)
    out[:, 30], out[:, 31], out[:, 42] = rd[:, focal], rdd[:, focal], head[:, focal]
    out[:, 32], out[:, 33], out[:, 43] = rd[:, 1 - focal], rdd[:, 1 - focal], head[:, 1 - focal]
    rd, rdd, head = kinematics_series(tg, trial.hz, center, trial.target_vel)
    out[:, 34:42:2], out[:, 35:42:2] = rd, rdd
    out[:, 44:48] = head
    return out


def extract_features(trial: Trial, index: int, focal: int, center=(0.0, 0.0)) -> np.ndarray:
    """State vector of ``focal`` at frame ``index``.

    Kinematic terms use a three-frame stencil, so only a small neighbourhood
    of the trial is evaluated.
    """
    n = trial.n_frames
    if not 0 <= index < n:
        raise IndexError(f"frame index {index} outside trial of {n} frames")
    if n < 3:
        raise ValueError("feature extraction needs at least 3 frames")
    lo = min(max(index - 1, 0), n - 3)
    return trial_features(_slice(trial, lo, lo + 3), focal, center)[index - lo]


def _slice(trial: Trial, lo: int, hi: int) -> Trial:
    def cut(a):
        return None if a is None else a[lo:hi]
    return Trial(trial.trial_id, trial.expertise, trial.hz, trial.success, trial.t[lo:hi],
                 trial.herders[lo:hi], trial.targets[lo:hi], cut(trial.herder_vel),
                 cut(trial.target_vel), cut(trial.labels))


def write_hxf(path, matrix: np.ndarray) -> None:
    m = np.ascontiguousarray(matrix, dtype="<f8")
    if m.ndim != 2 or m.shape[1] != N_FEATURES:
        raise ValueError(f"feature matrix must have shape (n, {N_FEATURES})")
    with open(path, "wb") as fh:
        fh.write(HXF_MAGIC)
        fh.write(struct.pack("<III", HXF_VERSION, m.shape[0], m.shape[1]))
        fh.write(m.tobytes())


def read_hxf(path) -> np.ndarray:
    with open(path, "rb") as fh:
        rd = Reader(fh.read(), str(path))
    if rd.take(4) != HXF_MAGIC:
        raise BadMagicError(f"{path}: not a feature matrix file")
    version, rows, cols = rd.unpack("<III")
    if version != HXF_VERSION:
        raise UnsupportedVersionError(f"{path}: feature file version {version} is not supported", version)
    raw = rd.take(rows * cols * 8)
    return np.frombuffer(raw, dtype="<f8").reshape(rows, cols).astype(np.float64)
