"""PPO with GAE over lockstep vectorised rollouts.

The trainer is agnostic to what the policy observes and how its samples
become environment actions; that mapping lives in an *agent* object (see
:class:`DirectAgent` and ``blending.BlendAgent``). Sub-policies, the
domain-randomisation baseline and the blending gate all go through
:func:`train_agent`.
"""
from __future__ import annotations

import csv
import logging
import math
from collections import deque
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .env import OBS_DIM, ACT_DIM, EnvConfig, VecEnv, sample_impairments
from .nn import Adam, GaussianPolicy, Mlp, clip_by_global_norm

log = logging.getLogger(__name__)


@dataclass
class PpoConfig:
    gamma: float = 0.99
    lam: float = 0.95
    clip: float = 0.2
    lr: float = 3e-4
    rollout_steps: int = 4000
    epochs: int = 10
    minibatch: int = 500
    vf_coef: float = 0.5
    ent_coef: float = 0.0
    max_grad_norm: float = 0.5
    total_steps: int = 300_000
    moving_average: int = 50

    def validate(self, horizon: int) -> None:
        if not (0 < self.gamma <= 1 and 0 < self.lam <= 1):
            raise ValueError("gamma and lambda must lie in (0, 1]")
        if self.clip <= 0:
            raise ValueError("clip epsilon must be positive")
        if self.rollout_steps % horizon:
            raise ValueError(f"rollout_steps={self.rollout_steps} is not a multiple of horizon={horizon}")
        if self.minibatch <= 0 or self.epochs <= 0:
            raise ValueError("minibatch and epochs must be positive")

    @classmethod
    def from_dict(cls, data: dict) -> "PpoConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown PpoConfig keys: {sorted(unknown)}")
        return cls(**data)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class RolloutBuffer:
    """Time-major arrays of shape ``(T, n_envs, ...)``."""

    obs: np.ndarray
    actions: np.ndarray
    log_probs: np.ndarray
    rewards: np.ndarray
    values: np.ndarray
    dones: np.ndarray
    forces: np.ndarray
    advantages: np.ndarray | None = None
    returns: np.ndarray | None = None
    episode_returns: list = field(default_factory=list)
    episode_forces: list = field(default_factory=list)

    def __len__(self) -> int:
        return self.rewards.size

    def flat(self, name: str) -> np.ndarray:
        a = getattr(self, name)
        return a.reshape(a.shape[0] * a.shape[1], *a.shape[2:])


@dataclass
class TrainCurve:
    seed: int
    points: list = field(default_factory=list)  # (timestep, moving average reward)

    def append(self, timestep: int, value: float) -> None:
        if self.points and timestep <= self.points[-1][0]:
            raise ValueError("timesteps must be strictly increasing")
        self.points.append((int(timestep), float(value)))

    def write_csv(self, path, append: bool = False) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        new = not (append and path.exists())
        with path.open("a" if append else "w", newline="") as fh:
            w = csv.writer(fh)
            if new:
                w.writerow(["seed", "timestep", "avg_reward"])
            for t, v in self.points:
                w.writerow([self.seed, t, repr(v)])

    @staticmethod
    def read_csv(path) -> list["TrainCurve"]:
        curves: dict[int, TrainCurve] = {}
        with Path(path).open(newline="") as fh:
            for row in csv.DictReader(fh):
                s = int(row["seed"])
                curves.setdefault(s, TrainCurve(s)).append(int(row["timestep"]), float(row["avg_reward"]))
        return list(curves.values())


# --- agents ---------------------------------------------------------------

class DirectAgent:
    """Policy acting on the full environment observation (sub-policies, DR)."""

    def __init__(self, policy: GaussianPolicy, value: Mlp):
        self.policy = policy
        self.value = value

    def start_episodes(self, venv: VecEnv, params, rng: np.random.Generator) -> None:
        pass

    def policy_input(self, obs: np.ndarray) -> np.ndarray:
        return obs

    def env_action(self, obs: np.ndarray, ppo_action: np.ndarray) -> np.ndarray:
        return ppo_action


def make_direct_agent(rng: np.random.Generator, in_dim: int = OBS_DIM, out_dim: int = ACT_DIM) -> DirectAgent:
    policy = GaussianPolicy(in_dim, out_dim, rng)
    value = Mlp([in_dim, 64, 64, 1], rng, out_gain=1.0)
    return DirectAgent(policy, value)


# --- rollouts -------------------------------------------------------------

def collect_rollout(venv: VecEnv, agent, scenario: str, n_steps: int,
                    param_rng: np.random.Generator, action_rng: np.random.Generator,
                    deterministic: bool = False) -> RolloutBuffer:
    """Roll ``n_steps`` transitions; every slot starts a fresh episode with new impairments."""
    horizon = venv.config.horizon
    per_round = venv.n * horizon
    if n_steps % per_round:
        raise ValueError(f"n_steps={n_steps} must be a multiple of n_envs*horizon={per_round}")
    rounds = n_steps // per_round
    T = rounds * horizon
    in_dim, act_dim = agent.policy.in_dim, agent.policy.out_dim
    buf = RolloutBuffer(
        obs=np.zeros((T, venv.n, in_dim)), actions=np.zeros((T, venv.n, act_dim)),
        log_probs=np.zeros((T, venv.n)), rewards=np.zeros((T, venv.n)),
        values=np.zeros((T, venv.n)), dones=np.zeros((T, venv.n), dtype=bool),
        forces=np.zeros((T, venv.n)))
    t = 0
    for _ in range(rounds):
        params = [sample_impairments(scenario, param_rng) for _ in range(venv.n)]
        obs = venv.reset(params)
        agent.start_episodes(venv, params, param_rng)
        ep_ret = np.zeros(venv.n)
        done = False
        while not done:
            x = agent.policy_input(obs)
            mean = agent.policy.mean(x)
            if deterministic:
                act = mean
                logp = np.zeros(venv.n)
            else:
                z = action_rng.standard_normal(mean.shape)
                act = mean + np.exp(agent.policy.log_std) * z
                logp = np.sum(-0.5 * z * z - agent.policy.log_std - 0.5 * math.log(2 * math.pi), axis=-1)
            buf.obs[t] = x
            buf.actions[t] = act
            buf.log_probs[t] = logp
            buf.values[t] = agent.value(x)[:, 0]
            obs, rew, force, done = venv.step(agent.env_action(obs, act))
            buf.rewards[t] = rew
            buf.forces[t] = force
            buf.dones[t] = done
            ep_ret += rew
            t += 1
        buf.episode_returns.extend(ep_ret.tolist())
        buf.episode_forces.extend(venv.total_force.tolist())
    if not (np.all(np.isfinite(buf.rewards)) and np.all(np.isfinite(buf.obs))):
        raise FloatingPointError("non-finite values in rollout buffer")
    return buf


def compute_gae(rewards, values, dones, gamma: float, lam: float, last_value=0.0):
    """Generalised advantage estimation along axis 0.

    ``last_value`` bootstraps the step after the final entry when it is not
    terminal; terminal steps bootstrap with zero.
    """
    rewards = np.asarray(rewards, dtype=float)
    values = np.asarray(values, dtype=float)
    dones = np.asarray(dones, dtype=float)
    if not (rewards.shape == values.shape == dones.shape):
        raise ValueError("rewards, values and dones must have equal shapes")
    adv = np.zeros_like(rewards)
    next_adv = np.zeros(rewards.shape[1:])
    next_value = np.broadcast_to(np.asarray(last_value, float), rewards.shape[1:])
    for t in reversed(range(rewards.shape[0])):
        nonterminal = 1.0 - dones[t]
        delta = rewards[t] + gamma * next_value * nonterminal - values[t]
        next_adv = delta + gamma * lam * nonterminal * next_adv
        adv[t] = next_adv
        next_value = values[t]
    return adv, adv + values


def normalize(x: np.ndarray) -> np.ndarray:
    return (x - x.mean()) / (x.std() + 1e-12) if x.size > 1 else x - x.mean()


def clipped_objective(ratio, adv, clip: float):
    """Per-sample PPO surrogate ``min(r A, clip(r, 1-eps, 1+eps) A)``."""
    ratio = np.asarray(ratio, float)
    adv = np.asarray(adv, float)
    return np.minimum(ratio * adv, np.clip(ratio, 1.0 - clip, 1.0 + clip) * adv)


def policy_loss_and_grads(policy: GaussianPolicy, obs, actions, old_logp, adv, clip: float,
                          ent_coef: float = 0.0):
    """Clipped surrogate loss and its gradient w.r.t. ``policy.parameters()``."""
    mean, cache = policy.net.forward(obs)
    inv_std = np.exp(-policy.log_std)
    z = (actions - mean) * inv_std
    logp = np.sum(-0.5 * z * z - policy.log_std - 0.5 * math.log(2 * math.pi), axis=-1)
    ratio = np.exp(logp - old_logp)
    surr1 = ratio * adv
    surr2 = np.clip(ratio, 1.0 - clip, 1.0 + clip) * adv
    B = len(adv)
    loss = -np.mean(np.minimum(surr1, surr2)) - ent_coef * policy.entropy()
    if not math.isfinite(loss):
        raise FloatingPointError(f"non-finite policy loss {loss} (log_std={policy.log_std.tolist()})")
    unclipped = surr1 <= surr2
    dlogp = np.where(unclipped, -ratio * adv / B, 0.0)
    dmean = dlogp[:, None] * z * inv_std
    dlog_std = np.sum(dlogp[:, None] * (z * z - 1.0), axis=0) - ent_coef
    grads = [*policy.net.backward(cache, dmean), dlog_std]
    stats = {
        "clip_frac": float(np.mean(np.abs(ratio - 1.0) > clip)),
        "approx_kl": float(np.mean(old_logp - logp)),
    }
    return float(loss), grads, stats


def value_loss_and_grads(value: Mlp, obs, returns, coef: float = 1.0):
    v, cache = value.forward(obs)
    err = v[:, 0] - returns
    loss = float(np.mean(err * err))
    if not math.isfinite(loss):
        raise FloatingPointError(f"non-finite value loss {loss}")
    grads = value.backward(cache, (coef * 2.0 * err / len(err))[:, None])
    return loss, grads


class PpoLearner:
    """Holds the optimisers so Adam moments persist across updates."""

    def __init__(self, agent, config: PpoConfig):
        self.agent = agent
        self.config = config
        self.pi_opt = Adam(agent.policy.parameters(), lr=config.lr)
        self.vf_opt = Adam(agent.value.params, lr=config.lr)

    def update(self, buf: RolloutBuffer, rng: np.random.Generator) -> dict:
        return ppo_update(self.agent.policy, self.agent.value, buf, self.config, rng,
                          self.pi_opt, self.vf_opt)


def prepare_advantages(buf: RolloutBuffer, config: PpoConfig) -> None:
    adv, ret = compute_gae(buf.rewards, buf.values, buf.dones, config.gamma, config.lam)
    buf.advantages = adv
    buf.returns = ret


def ppo_update(policy: GaussianPolicy, value: Mlp, buf: RolloutBuffer, config: PpoConfig,
               rng: np.random.Generator, pi_opt: Adam | None = None, vf_opt: Adam | None = None) -> dict:
    """Run ``epochs`` passes of minibatch PPO. Gradients are clipped per network."""
    if buf.advantages is None:
        raise ValueError("compute advantages before calling ppo_update")
    pi_opt = pi_opt or Adam(policy.parameters(), lr=config.lr)
    vf_opt = vf_opt or Adam(value.params, lr=config.lr)
    obs = buf.flat("obs")
    acts = buf.flat("actions")
    old_logp = buf.flat("log_probs")
    adv = normalize(buf.flat("advantages"))
    ret = buf.flat("returns")
    n = len(adv)
    mb = min(config.minibatch, n)
    pl, vl, cf, kl = [], [], [], []
    for _ in range(config.epochs):
        order = rng.permutation(n)
        for start in range(0, n, mb):
            idx = order[start:start + mb]
            p_loss, p_grads, st = policy_loss_and_grads(
                policy, obs[idx], acts[idx], old_logp[idx], adv[idx], config.clip, config.ent_coef)
            v_loss, v_grads = value_loss_and_grads(value, obs[idx], ret[idx], config.vf_coef)
            p_grads, _ = clip_by_global_norm(p_grads, config.max_grad_norm)
            v_grads, _ = clip_by_global_norm(v_grads, config.max_grad_norm)
            pi_opt.step(p_grads)
            vf_opt.step(v_grads)
            policy.clamp_log_std()
            policy.net.touch()
            value.touch()
            pl.append(p_loss)
            vl.append(v_loss)
            cf.append(st["clip_frac"])
            kl.append(st["approx_kl"])
    return {"policy_loss": float(np.mean(pl)), "value_loss": float(np.mean(vl)),
            "clip_frac": float(np.mean(cf)), "approx_kl": float(np.mean(kl))}


# --- training loop --------------------------------------------------------

@dataclass
class TrainResult:
    agent: object
    curve: TrainCurve
    best_policy: GaussianPolicy
    best_score: float
    stats: list = field(default_factory=list)


def seed_streams(seed: int, n_envs: int):
    """Independent generators: (init, params, actions, minibatches, per-slot envs, estimator)."""
    ss = np.random.SeedSequence(int(seed))
    init, params, actions, minibatch, envs, estimator = ss.spawn(6)
    return (np.random.default_rng(init), np.random.default_rng(params),
            np.random.default_rng(actions), np.random.default_rng(minibatch),
            [np.random.default_rng(s) for s in envs.spawn(n_envs)],
            np.random.default_rng(estimator))


def train_agent(agent, scenario: str, config: PpoConfig, seed: int,
                env_config: EnvConfig | None = None, streams=None,
                on_update=None) -> TrainResult:
    """Alternate rollouts and PPO updates until ``config.total_steps``."""
    env_config = env_config or EnvConfig()
    config.validate(env_config.horizon)
    n_envs = config.rollout_steps // env_config.horizon
    if streams is None:
        streams = seed_streams(seed, n_envs)
    _, param_rng, action_rng, mb_rng, env_rngs, _ = streams
    venv = VecEnv(env_rngs, env_config)
    learner = PpoLearner(agent, config)
    curve = TrainCurve(seed)
    recent: deque = deque(maxlen=config.moving_average)
    best_score = -math.inf
    best_policy = agent.policy.copy()
    stats = []
    steps = 0
    while steps < config.total_steps:
        buf = collect_rollout(venv, agent, scenario, config.rollout_steps, param_rng, action_rng)
        steps += len(buf)
        recent.extend(buf.episode_returns)
        avg = float(np.mean(recent))
        curve.append(steps, avg)
        if avg > best_score:
            best_score = avg
            best_policy = agent.policy.copy()
        prepare_advantages(buf, config)
        st = learner.update(buf, mb_rng)
        st.update(timestep=steps, avg_reward=avg, mean_force=float(np.mean(buf.episode_forces)))
        stats.append(st)
        log.info("%s step=%d avg_reward=%.2f force=%.2f clip=%.3f", scenario, steps, avg,
                 st["mean_force"], st["clip_frac"])
        if on_update is not None:
            on_update(st)
    return TrainResult(agent, curve, best_policy, best_score, stats)


def train(scenario: str, config: PpoConfig, seed: int, env_config: EnvConfig | None = None) -> TrainResult:
    """Train an observation-conditioned policy on one impairment scenario."""
    env_config = env_config or EnvConfig()
    streams = seed_streams(seed, config.rollout_steps // env_config.horizon)
    agent = make_direct_agent(streams[0])
    return train_agent(agent, scenario, config, seed, env_config, streams)
