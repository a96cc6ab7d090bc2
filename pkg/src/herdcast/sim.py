"""Kinematic two-herder / four-target herding world with scripted herder policies.

Geometry and rates below are artifact choices (the recorded game did not
publish them); the 0.12 m repulsion radius, 50 Hz recording rate and 120 s
trial limit are the task's own values.
"""

from __future__ import annotations

import dataclasses
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .ingest import N_HERDERS, N_TARGETS, Trial

AIM_OFFSET = 0.10  # herder aims this far beyond its target, on the ray from the centre
HYSTERESIS = 1.10
DEMOTION = 0.5
BROWNIAN_CLIP = 4.0  # Brownian increments are truncated at this many standard deviations


@dataclass(frozen=True)
class WorldConfig:
    field_half_width: float = 1.5           # invented
    containment_radius: float = 0.3         # invented
    repulsion_radius: float = 0.12
    target_brownian_sigma: float = 0.05     # invented, m / sqrt(s)
    target_flee_speed: float = 0.2          # invented
    herder_max_speed: tuple = (1.2, 1.2)    # replaced per herder from the policies by run_trial
    record_hz: float = 50.0
    max_duration: float = 120.0
    center: tuple = (0.0, 0.0)
    target_spawn_radius: tuple = (0.7, 1.4)  # invented
    herder_spawn_half_width: float = 0.4     # invented

    def __post_init__(self):
        if not self.repulsion_radius > 0:
            raise ValueError("repulsion_radius must be positive")
        if not self.containment_radius > self.repulsion_radius:
            raise ValueError("containment_radius must exceed repulsion_radius")
        if not self.record_hz > 0 or not self.max_duration > 0:
            raise ValueError("record_hz and max_duration must be positive")
        speeds = (self.target_brownian_sigma, self.target_flee_speed, *self.herder_max_speed)
        if min(speeds) < 0:
            raise ValueError("speeds and sigma must be non-negative")
        lo, hi = self.target_spawn_radius
        if not 0 <= lo <= hi:
            raise ValueError("target_spawn_radius must be an ordered non-negative pair")

    @property
    def containment_area(self) -> float:
        return float(np.pi * self.containment_radius ** 2)

    @property
    def dt(self) -> float:
        return 1.0 / self.record_hz


@dataclass(frozen=True)
class PolicyKind:
    variant: str = "expert"
    period: float = 0.1
    epsilon: float = 0.0
    direction_sensitive: bool = True
    max_speed: float = 1.2

    def __post_init__(self):
        if self.variant not in ("expert", "novice"):
            raise ValueError(f"unknown policy variant {self.variant!r}")
        if not 0.0 <= self.epsilon <= 1.0:
            raise ValueError("epsilon must lie in [0, 1]")
        if not self.period > 0:
            raise ValueError("period must be positive")

    @classmethod
    def expert(cls) -> "PolicyKind":
        return cls("expert", period=0.1, epsilon=0.0, direction_sensitive=True, max_speed=1.2)

    @classmethod
    def novice(cls) -> "PolicyKind":
        return cls("novice", period=0.3, epsilon=0.15, direction_sensitive=False, max_speed=0.8)

    @classmethod
    def named(cls, name: str) -> "PolicyKind":
        if name == "expert":
            return cls.expert()
        if name == "novice":
            return cls.novice()
        raise ValueError(f"unknown policy {name!r}")


@dataclass
class WorldState:
    t: float
    herder_pos: np.ndarray
    target_pos: np.ndarray
    herder_vel: np.ndarray = field(default_factory=lambda: np.zeros((N_HERDERS, 2)))
    target_vel: np.ndarray = field(default_factory=lambda: np.zeros((N_TARGETS, 2)))
    decisions: np.ndarray = field(default_factory=lambda: np.zeros(N_HERDERS, dtype=np.int64))

    def __post_init__(self):
        self.herder_pos = np.array(self.herder_pos, dtype=np.float64).reshape(N_HERDERS, 2)
        self.target_pos = np.array(self.target_pos, dtype=np.float64).reshape(N_TARGETS, 2)
        self.herder_vel = np.array(self.herder_vel, dtype=np.float64).reshape(N_HERDERS, 2)
        self.target_vel = np.array(self.target_vel, dtype=np.float64).reshape(N_TARGETS, 2)
        self.decisions = np.array(self.decisions, dtype=np.int64).reshape(N_HERDERS)

    def copy(self) -> "WorldState":
        return WorldState(self.t, self.herder_pos.copy(), self.target_pos.copy(), self.herder_vel.copy(),
                          self.target_vel.copy(), self.decisions.copy())

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(a)) for a in
                   (self.herder_pos, self.target_pos, self.herder_vel, self.target_vel)) and np.isfinite(self.t)


def _reflect(x: np.ndarray, hw: float) -> np.ndarray:
    # fold into [-hw, hw]; more than one fold is only possible for absurd steps
    period = 4.0 * hw
    y = np.mod(x + hw, period)
    y = np.where(y > 2.0 * hw, period - y, y)
    return y - hw


def _unit(v: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(v, axis=-1, keepdims=True)
    return np.divide(v, n, out=np.zeros_like(v), where=n > 0)


def flee_directions(herder_pos: np.ndarray, target_pos: np.ndarray, radius: float):
    """Return (influenced mask, unit flee direction) for every target.

    Each herder within ``radius`` of a target pushes it along the unit vector
    pointing away from that herder; several pushers add up before
    normalising.
    """
    away = target_pos[:, None, :] - herder_pos[None, :, :]  # (targets, herders, 2)
    dist = np.linalg.norm(away, axis=2)
    near = dist < radius
    push = np.where(near[:, :, None], _unit(away), 0.0).sum(axis=1)
    return near.any(axis=1), _unit(push)


def step_world(state: WorldState, cfg: WorldConfig, commands, dt: float, rng: np.random.Generator) -> WorldState:
    """Advance the world by ``dt`` seconds.

    Targets near a herder flee at ``cfg.target_flee_speed``; all others take
    a (truncated) Brownian step reflected at the fence. Herders move toward
    ``commands`` at no more than their maximum speed.
    """
    if not dt > 0:
        raise ValueError("dt must be positive")
    commands = np.asarray(commands, dtype=np.float64).reshape(N_HERDERS, 2)
    if not np.all(np.isfinite(commands)):
        raise ValueError("herder commands must be finite")
    if not state.is_finite():
        raise ValueError("world state contains non-finite values")
    hw = cfg.field_half_width

    noise = rng.standard_normal((N_TARGETS, 2))
    scale = cfg.target_brownian_sigma * np.sqrt(dt)
    norms = np.linalg.norm(noise, axis=1, keepdims=True)
    noise = np.where(norms > BROWNIAN_CLIP, noise * (BROWNIAN_CLIP / np.maximum(norms, 1e-300)), noise)
    influenced, direction = flee_directions(state.herder_pos, state.target_pos, cfg.repulsion_radius)
    step = np.where(influenced[:, None], cfg.target_flee_speed * dt * direction, scale * noise)
    new_targets = _reflect(state.target_pos + step, hw)

    delta = commands - state.herder_pos
    dist = np.linalg.norm(delta, axis=1, keepdims=True)
    max_step = np.asarray(cfg.herder_max_speed, dtype=np.float64).reshape(N_HERDERS, 1) * dt
    factor = np.minimum(1.0, np.divide(max_step, dist, out=np.ones_like(dist), where=dist > 0))
    new_herders = np.clip(state.herder_pos + delta * factor, -hw, hw)

    return WorldState(
        t=state.t + dt,
        herder_pos=new_herders,
        target_pos=new_targets,
        herder_vel=(new_herders - state.herder_pos) / dt,
        target_vel=(new_targets - state.target_pos) / dt,
        decisions=state.decisions.copy(),
    )


def select_target(policy: PolicyKind, state: WorldState, focal: int, rng: np.random.Generator,
                  cfg: WorldConfig = WorldConfig()) -> int:
    """Return the target ID (1..4) the focal herder should corral, or 0 when none is left."""
    if focal not in (0, 1):
        raise ValueError("focal must be 0 or 1")
    center = np.asarray(cfg.center, dtype=np.float64)
    rel = state.target_pos - center
    radial = np.linalg.norm(rel, axis=1)
    outside = radial >= cfg.containment_radius
    if policy.variant == "novice":
        # the draw is unconditional so the stream advances identically on every tick
        u = rng.random()
        if not outside.any():
            return 0
        candidates = np.flatnonzero(outside)
        if u < policy.epsilon:
            return int(rng.choice(candidates)) + 1
        d_self = np.linalg.norm(state.target_pos - state.herder_pos[focal], axis=1)
        return int(np.argmin(np.where(outside, d_self, np.inf))) + 1

    if not outside.any():
        return 0
    d_self = np.linalg.norm(state.target_pos - state.herder_pos[focal], axis=1)
    d_co = np.linalg.norm(state.target_pos - state.herder_pos[1 - focal], axis=1)
    eligible = outside & (d_self < d_co)
    if not eligible.any():
        eligible = outside
    current = int(state.decisions[focal])
    score = radial.copy()
    if policy.direction_sensitive:
        influenced, direction = flee_directions(state.herder_pos, state.target_pos, cfg.repulsion_radius)
        inbound = influenced & (np.einsum("ij,ij->i", direction, rel) < 0)
        if current > 0:
            inbound[current - 1] = False
        score = np.where(inbound, score * DEMOTION, score)
    # commitment: the current target is kept until it is contained or clearly
    # on the co-herder's side
    if current > 0 and outside[current - 1] and d_self[current - 1] <= HYSTERESIS * d_co[current - 1]:
        return current
    return int(np.argmax(np.where(eligible, score, -np.inf))) + 1


def aim_point(target: np.ndarray, center: np.ndarray) -> np.ndarray:
    u = target - center
    n = np.linalg.norm(u)
    u = u / n if n > 0 else np.array([1.0, 0.0])
    return target + AIM_OFFSET * u


def _commands(state: WorldState, cfg: WorldConfig) -> np.ndarray:
    center = np.asarray(cfg.center, dtype=np.float64)
    cmd = state.herder_pos.copy()
    for h in range(N_HERDERS):
        label = int(state.decisions[h])
        if label > 0:
            cmd[h] = np.clip(aim_point(state.target_pos[label - 1], center),
                             -cfg.field_half_width, cfg.field_half_width)
    return cmd


def initial_state(cfg: WorldConfig, rng: np.random.Generator) -> WorldState:
    center = np.asarray(cfg.center, dtype=np.float64)
    lo, hi = cfg.target_spawn_radius
    r = rng.uniform(lo, hi, N_TARGETS)
    theta = rng.uniform(-np.pi, np.pi, N_TARGETS)
    targets = center + np.stack([r * np.cos(theta), r * np.sin(theta)], axis=1)
    hw = cfg.herder_spawn_half_width
    herders = center + rng.uniform(-hw, hw, (N_HERDERS, 2))
    limit = cfg.field_half_width
    return WorldState(0.0, np.clip(herders, -limit, limit), np.clip(targets, -limit, limit))


def all_contained(target_pos: np.ndarray, cfg: WorldConfig) -> bool:
    radial = np.linalg.norm(target_pos - np.asarray(cfg.center), axis=1)
    return bool(np.all(radial < cfg.containment_radius))


def run_trial(cfg: WorldConfig, policies: Sequence[PolicyKind], seed: int, trial_id: Optional[str] = None,
              initial: Optional[WorldState] = None, expertise: Optional[str] = None) -> Trial:
    """Simulate one episode until all targets are contained or time runs out.

    Every frame carries both herders' current decisions as ground-truth labels.
    The result depends only on ``(cfg, policies, seed, initial)``.
    """
    if len(policies) != N_HERDERS:
        raise ValueError("exactly two policies are required")
    cfg = dataclasses.replace(cfg, herder_max_speed=tuple(float(p.max_speed) for p in policies))
    init_ss, world_ss, *policy_ss = np.random.SeedSequence(seed).spawn(2 + N_HERDERS)
    world_rng = np.random.default_rng(world_ss)
    policy_rngs = [np.random.default_rng(s) for s in policy_ss]
    state = initial.copy() if initial is not None else initial_state(cfg, np.random.default_rng(init_ss))
    state.t = 0.0
    dt = cfg.dt
    periods = [max(1, int(round(p.period * cfg.record_hz))) for p in policies]
    max_steps = int(round(cfg.max_duration * cfg.record_hz))

    herders, targets, hvel, tvel, labels = [], [], [], [], []
    success = False
    for k in range(max_steps + 1):
        contained = all_contained(state.target_pos, cfg)
        for h in range(N_HERDERS):
            if contained:
                state.decisions[h] = 0
            elif k % periods[h] == 0:
                state.decisions[h] = select_target(policies[h], state, h, policy_rngs[h], cfg)
        herders.append(state.herder_pos)
        targets.append(state.target_pos)
        hvel.append(state.herder_vel)
        tvel.append(state.target_vel)
        labels.append(state.decisions.copy())
        if contained:
            success = True
            break
        if k == max_steps:
            break
        state = step_world(state, cfg, _commands(state, cfg), dt, world_rng)

    n = len(herders)
    if expertise is None:
        expertise = policies[0].variant
    return Trial(
        trial_id=trial_id if trial_id is not None else f"{expertise}-{seed}",
        expertise=expertise,
        hz=cfg.record_hz,
        success=success,
        t=np.arange(n) / cfg.record_hz,
        herders=np.array(herders),
        targets=np.array(targets),
        herder_vel=np.array(hvel),
        target_vel=np.array(tvel),
        labels=np.array(labels),
        seed=seed,
    )


def trial_seed(seed: int, index: int) -> int:
    """Seed for the ``index``-th trial of a batch; independent of how the batch is scheduled."""
    return int(np.random.SeedSequence([seed, index]).generate_state(1, np.uint32)[0])


def _run_one(args):
    cfg, policies, seed, trial_id = args
    return run_trial(cfg, policies, seed, trial_id=trial_id)


def simulate_batch(policy: str, n_pairs: int, trials_per_pair: int, seed: int,
                   cfg: WorldConfig = WorldConfig(), n_jobs: int = 1) -> list[Trial]:
    """Run ``n_pairs * trials_per_pair`` trials of one policy pair, in a fixed order."""
    pol = PolicyKind.named(policy)
    jobs = []
    for p in range(n_pairs):
        for j in range(trials_per_pair):
            idx = p * trials_per_pair + j
            jobs.append((cfg, (pol, pol), trial_seed(seed, idx), f"{policy}-p{p:02d}-t{j:02d}"))
    if n_jobs <= 1 or len(jobs) <= 1:
        return [_run_one(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=n_jobs) as pool:
        return list(pool.map(_run_one, jobs, chunksize=max(1, len(jobs) // (4 * n_jobs))))
