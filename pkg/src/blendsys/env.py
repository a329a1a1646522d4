"""Planar impaired-human / assisting-robot arm simulation.

Both arms are two-link planar manipulators integrated with explicit Euler
steps. The human tracks a scripted sinusoidal joint trajectory through a
proportional controller whose output is corrupted by three impairments
(involuntary noise, weakness, limited range). The robot is velocity
controlled and is rewarded for pressing on the "itch" target located at the
midpoint of the human forearm.

Parameter vectors are flattened as ``[noise_std0, noise_std1, weakness,
range_limit]``.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

PARAM_DIM = 4
OBS_DIM = 14
ACT_DIM = 2
PARAM_NAMES = ("noise_std0", "noise_std1", "weakness", "range_limit")

INVOLUNTARY_STD = math.radians(5.0)
DR_MAX_NOISE_STD = math.radians(10.0)

SCENARIOS = ("none", "involuntary", "weak", "limited", "combined", "dr")


@dataclass(frozen=True)
class ParamVector:
    noise_std: tuple[float, float] = (0.0, 0.0)
    weakness: float = 1.0
    range_limit: float = 1.0

    def as_array(self) -> np.ndarray:
        return np.array([self.noise_std[0], self.noise_std[1], self.weakness, self.range_limit])

    @classmethod
    def from_array(cls, values) -> "ParamVector":
        v = np.asarray(values, dtype=float)
        if v.shape != (PARAM_DIM,):
            raise ValueError(f"parameter vector must have {PARAM_DIM} entries, got shape {v.shape}")
        if not np.all(np.isfinite(v)):
            raise ValueError("parameter vector must be finite")
        return cls((float(v[0]), float(v[1])), float(v[2]), float(v[3]))


NEUTRAL = ParamVector()


@dataclass(frozen=True)
class ParamBounds:
    lo: ParamVector = ParamVector((0.0, 0.0), 0.25, 0.5)
    hi: ParamVector = ParamVector((0.35, 0.35), 1.0, 1.0)

    def __post_init__(self):
        if np.any(self.lo.as_array() > self.hi.as_array()):
            raise ValueError("ParamBounds requires lo <= hi elementwise")

    @property
    def lo_array(self) -> np.ndarray:
        return self.lo.as_array()

    @property
    def hi_array(self) -> np.ndarray:
        return self.hi.as_array()

    @property
    def span(self) -> np.ndarray:
        return self.hi_array - self.lo_array

    @property
    def midpoint(self) -> np.ndarray:
        return 0.5 * (self.lo_array + self.hi_array)

    def clip(self, values) -> np.ndarray:
        return np.clip(np.asarray(values, dtype=float), self.lo_array, self.hi_array)

    def contains(self, values, tol: float = 0.0) -> bool:
        v = np.asarray(values, dtype=float)
        return bool(np.all(v >= self.lo_array - tol) and np.all(v <= self.hi_array + tol))


DEFAULT_BOUNDS = ParamBounds()


@dataclass
class EnvConfig:
    """Physical constants and reward weights. Every field can be overridden from JSON."""

    dt: float = 0.1
    horizon: int = 200
    human_lengths: tuple[float, float] = (0.5, 0.4)
    human_base: tuple[float, float] = (0.0, 0.0)
    robot_lengths: tuple[float, float] = (0.5, 0.4)
    robot_base: tuple[float, float] = (1.2, 0.0)
    robot_init: tuple[float, float] = (math.pi / 2, math.pi / 2)
    human_gain: float = 2.0
    human_limit: float = math.pi / 2
    target_amplitude: tuple[float, float] = (0.6, 0.4)
    target_freq: float = 0.5
    max_joint_speed: float = 2.0
    contact_radius: float = 0.05
    contact_stiffness: float = 100.0
    w_distance: float = -1.0
    w_action: float = -0.01
    w_force: float = 1.0

    def __post_init__(self):
        for name in ("human_lengths", "human_base", "robot_lengths", "robot_base",
                     "robot_init", "target_amplitude"):
            setattr(self, name, tuple(float(x) for x in getattr(self, name)))
        positive = [self.dt, self.horizon, *self.human_lengths, *self.robot_lengths,
                    self.human_gain, self.human_limit, self.max_joint_speed,
                    self.contact_radius, self.contact_stiffness]
        if not all(p > 0 for p in positive):
            raise ValueError("EnvConfig lengths, gains and limits must be strictly positive")

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, data: dict) -> "EnvConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown EnvConfig keys: {sorted(unknown)}")
        return cls(**data)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))

    @classmethod
    def load(cls, path) -> "EnvConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    @property
    def max_separation(self) -> float:
        """Upper bound on the effector-to-target distance."""
        hb, rb = np.asarray(self.human_base), np.asarray(self.robot_base)
        return float(np.linalg.norm(hb - rb) + self.human_lengths[0]
                     + 0.5 * self.human_lengths[1] + sum(self.robot_lengths))

    @property
    def reward_bounds(self) -> tuple[float, float]:
        lo = self.w_distance * self.max_separation + self.w_action * 2.0 * 2.0
        hi = self.w_force * self.contact_stiffness * self.contact_radius
        return lo, hi


# --- geometry -------------------------------------------------------------

def forward_kinematics(angles, lengths, base) -> np.ndarray:
    """Effector position of a planar two-link arm. Accepts batched angles ``(..., 2)``."""
    th = np.asarray(angles, dtype=float)
    l1, l2 = lengths
    t1 = th[..., 0]
    t12 = th[..., 0] + th[..., 1]
    x = base[0] + l1 * np.cos(t1) + l2 * np.cos(t12)
    y = base[1] + l1 * np.sin(t1) + l2 * np.sin(t12)
    return np.stack([x, y], axis=-1)


def target_position(human_angles, config: EnvConfig | None = None) -> np.ndarray:
    """Itch target: midpoint of the human forearm."""
    cfg = config or EnvConfig()
    l1, l2 = cfg.human_lengths
    return forward_kinematics(human_angles, (l1, 0.5 * l2), cfg.human_base)


def contact_force(effector, target, config: EnvConfig | None = None):
    cfg = config or EnvConfig()
    d = np.linalg.norm(np.asarray(effector, float) - np.asarray(target, float), axis=-1)
    return cfg.contact_stiffness * np.maximum(0.0, cfg.contact_radius - d)


def reward(distance, action, force, config: EnvConfig | None = None):
    cfg = config or EnvConfig()
    a = np.asarray(action, dtype=float)
    return (cfg.w_distance * np.asarray(distance) + cfg.w_action * np.sum(a * a, axis=-1)
            + cfg.w_force * np.asarray(force))


def apply_impairments(command, params: ParamVector, rng: np.random.Generator,
                      max_speed: float = 2.0) -> np.ndarray:
    """Weakness-scaled command plus Gaussian involuntary motion, speed clamped."""
    z = rng.standard_normal(2)
    return _impair(np.asarray(command, float), params.as_array(), z, max_speed)


def _impair(command, pvec, z, max_speed):
    # pvec: (..., 4); z: (..., 2) standard normals
    out = pvec[..., 2:3] * command + pvec[..., 0:2] * z
    return np.clip(out, -max_speed, max_speed)


# --- impairment sampling --------------------------------------------------

def sample_impairments(scenario: str, rng: np.random.Generator,
                       bounds: ParamBounds = DEFAULT_BOUNDS,
                       weak_std: float = 0.2, limited_std: float = 0.1) -> ParamVector:
    """Draw one episode's parameters for a named scenario."""
    if scenario not in SCENARIOS:
        raise ValueError(f"unknown scenario {scenario!r}; expected one of {SCENARIOS}")
    lo, hi = bounds.lo_array, bounds.hi_array
    if scenario == "none":
        return NEUTRAL
    if scenario == "dr":
        u = rng.uniform(size=4)
        noise = DR_MAX_NOISE_STD * u[:2]
        weak = 0.25 + 0.75 * u[2]
        rng_lim = 0.5 + 0.5 * u[3]
        return ParamVector.from_array(bounds.clip([noise[0], noise[1], weak, rng_lim]))
    v = NEUTRAL.as_array()
    if scenario in ("involuntary", "combined"):
        v[0:2] = INVOLUNTARY_STD
    if scenario in ("weak", "combined"):
        v[2] = np.clip(0.66 + weak_std * rng.standard_normal(), lo[2], hi[2])
    if scenario in ("limited", "combined"):
        v[3] = np.clip(0.75 + limited_std * rng.standard_normal(), lo[3], hi[3])
    return ParamVector.from_array(v)


# --- state and stepping ---------------------------------------------------

@dataclass
class EnvState:
    human_q: np.ndarray
    human_dq: np.ndarray
    robot_q: np.ndarray
    robot_dq: np.ndarray
    params: ParamVector
    rng: np.random.Generator
    t: int = 0
    total_force: float = 0.0


@dataclass
class StepResult:
    obs: np.ndarray
    reward: float
    force: float
    done: bool


def reset(params: ParamVector, rng: np.random.Generator, config: EnvConfig | None = None) -> EnvState:
    cfg = config or EnvConfig()
    return EnvState(np.zeros(2), np.zeros(2), np.array(cfg.robot_init, dtype=float),
                    np.zeros(2), params, rng)


def scripted_targets(t, config: EnvConfig) -> np.ndarray:
    """Human reference joint angles at time ``t`` seconds."""
    amp = np.asarray(config.target_amplitude)
    return amp * np.sin(config.target_freq * np.asarray(t, dtype=float))[..., None]


def observe(human_q, human_dq, robot_q, robot_dq, config: EnvConfig) -> np.ndarray:
    tgt = target_position(human_q, config)
    eff = forward_kinematics(robot_q, config.robot_lengths, config.robot_base)
    return np.concatenate([human_q, human_dq, robot_q, robot_dq, tgt, eff, tgt - eff], axis=-1)


def _advance(human_q, robot_q, t, pvec, z, action, cfg: EnvConfig):
    """Shared batched transition. Returns new arrays plus reward terms."""
    a = np.clip(action, -1.0, 1.0)
    ref = scripted_targets((t + 1) * cfg.dt, cfg)
    cmd = np.clip(cfg.human_gain * (ref - human_q), -cfg.max_joint_speed, cfg.max_joint_speed)
    vel = _impair(cmd, pvec, z, cfg.max_joint_speed)
    limit = pvec[..., 3:4] * cfg.human_limit
    new_hq = np.clip(human_q + cfg.dt * vel, -limit, limit)
    new_hdq = (new_hq - human_q) / cfg.dt
    new_rdq = cfg.max_joint_speed * a
    new_rq = robot_q + cfg.dt * new_rdq
    tgt = target_position(new_hq, cfg)
    eff = forward_kinematics(new_rq, cfg.robot_lengths, cfg.robot_base)
    dist = np.linalg.norm(tgt - eff, axis=-1)
    force = cfg.contact_stiffness * np.maximum(0.0, cfg.contact_radius - dist)
    rew = reward(dist, a, force, cfg)
    return new_hq, new_hdq, new_rq, new_rdq, rew, force


def step(state: EnvState, robot_action, config: EnvConfig | None = None) -> StepResult:
    """Advance one step in place and return the transition result."""
    cfg = config or EnvConfig()
    if state.t >= cfg.horizon:
        raise RuntimeError("cannot step a finished episode; call reset()")
    z = state.rng.standard_normal(2)
    hq, hdq, rq, rdq, rew, force = _advance(
        state.human_q, state.robot_q, state.t, state.params.as_array(), z,
        np.asarray(robot_action, dtype=float), cfg)
    state.human_q, state.human_dq, state.robot_q, state.robot_dq = hq, hdq, rq, rdq
    state.t += 1
    state.total_force += float(force)
    obs = observe(hq, hdq, rq, rdq, cfg)
    return StepResult(obs, float(rew), float(force), state.t == cfg.horizon)


class PlanarAssistEnv:
    """Single-episode gym-style wrapper around :func:`reset` / :func:`step`."""

    def __init__(self, config: EnvConfig | None = None, seed=None):
        self.config = config or EnvConfig()
        self.rng = np.random.default_rng(seed)
        self.state: EnvState | None = None

    def reset(self, params: ParamVector = NEUTRAL) -> np.ndarray:
        self.state = reset(params, self.rng, self.config)
        s = self.state
        return observe(s.human_q, s.human_dq, s.robot_q, s.robot_dq, self.config)

    def step(self, action) -> StepResult:
        if self.state is None:
            raise RuntimeError("reset() must be called before step()")
        return step(self.state, action, self.config)


class VecEnv:
    """``n`` environments advanced in lockstep.

    Each slot owns its RNG stream, so slot ``i`` behaves exactly like a
    :class:`PlanarAssistEnv` driven by the same generator. All slots share
    the horizon, which is how rollouts are organised anyway.
    """

    def __init__(self, rngs: list[np.random.Generator], config: EnvConfig | None = None):
        self.config = config or EnvConfig()
        self.rngs = list(rngs)
        self.n = len(self.rngs)
        self.t = 0
        self.params = np.tile(NEUTRAL.as_array(), (self.n, 1))
        self.human_q = np.zeros((self.n, 2))
        self.human_dq = np.zeros((self.n, 2))
        self.robot_q = np.tile(np.array(self.config.robot_init, float), (self.n, 1))
        self.robot_dq = np.zeros((self.n, 2))
        self.total_force = np.zeros(self.n)

    def reset(self, params: list[ParamVector]) -> np.ndarray:
        if len(params) != self.n:
            raise ValueError("need one ParamVector per slot")
        self.params = np.stack([p.as_array() for p in params])
        self.t = 0
        self.human_q = np.zeros((self.n, 2))
        self.human_dq = np.zeros((self.n, 2))
        self.robot_q = np.tile(np.array(self.config.robot_init, float), (self.n, 1))
        self.robot_dq = np.zeros((self.n, 2))
        self.total_force = np.zeros(self.n)
        return self.observe()

    def observe(self) -> np.ndarray:
        return observe(self.human_q, self.human_dq, self.robot_q, self.robot_dq, self.config)

    def step(self, actions):
        cfg = self.config
        if self.t >= cfg.horizon:
            raise RuntimeError("cannot step a finished episode; call reset()")
        z = np.stack([r.standard_normal(2) for r in self.rngs])
        hq, hdq, rq, rdq, rew, force = _advance(
            self.human_q, self.robot_q, self.t, self.params, z,
            np.asarray(actions, dtype=float), cfg)
        self.human_q, self.human_dq, self.robot_q, self.robot_dq = hq, hdq, rq, rdq
        self.t += 1
        self.total_force += force
        return self.observe(), rew, force, self.t == cfg.horizon


def ik_tracking_action(obs, config: EnvConfig | None = None) -> np.ndarray:
    """Scripted robot controller: move joints toward an IK solution for the target.

    Used as a learning-free reference to validate the force metric.
    """
    cfg = config or EnvConfig()
    obs = np.atleast_2d(obs)
    robot_q = obs[:, 4:6]
    target = obs[:, 8:10]
    l1, l2 = cfg.robot_lengths
    rel = target - np.asarray(cfg.robot_base)
    r2 = np.sum(rel * rel, axis=-1)
    c2 = np.clip((r2 - l1 * l1 - l2 * l2) / (2 * l1 * l2), -1.0, 1.0)
    q2 = np.arccos(c2)  # elbow-up branch reachable from the default start pose
    q1 = np.arctan2(rel[:, 1], rel[:, 0]) - np.arctan2(l2 * np.sin(q2), l1 + l2 * np.cos(q2))
    desired = np.stack([q1, q2], axis=-1)
    diff = (desired - robot_q + np.pi) % (2 * np.pi) - np.pi
    return np.clip(diff / (cfg.max_joint_speed * cfg.dt), -1.0, 1.0)
