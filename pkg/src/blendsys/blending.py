"""Blending network over frozen sub-policies.

The gate sees only the current parameter estimate and emits one real weight
per sub-policy; the environment action is ``(1/N) * sum_i w_i * pi_i(s)``
with each ``pi_i`` the deterministic mean of a frozen sub-policy.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .env import OBS_DIM, PARAM_DIM, EnvConfig, VecEnv
from .nn import GaussianPolicy, Mlp, gaussian_sample
from .ppo import PpoConfig, TrainResult, seed_streams, train_agent
from .sysid import ESTIMATOR_KINDS, make_estimator

SUB_POLICY_ORDER = ("involuntary", "weak", "limited")


def policy_hash(policy: GaussianPolicy) -> str:
    return hashlib.sha256(json.dumps(policy.to_dict()).encode()).hexdigest()


def blend_action_raw(weights, sub_actions) -> np.ndarray:
    """Weighted mean ``(1/N) sum_i w_i a_i`` without clamping. Supports batches."""
    w = np.asarray(weights, float)
    a = np.asarray(sub_actions, float)
    n = w.shape[-1]
    if a.shape[0] != n:
        raise ValueError(f"got {a.shape[0]} sub-actions for {n} weights")
    # a: (N, ..., act_dim); w: (..., N)
    return np.einsum("...n,n...d->...d", w, a) / n


def blend_action(weights, sub_actions) -> np.ndarray:
    return np.clip(blend_action_raw(weights, sub_actions), -1.0, 1.0)


class SubPolicySet:
    def __init__(self, policies: list[GaussianPolicy], names=SUB_POLICY_ORDER):
        if len(policies) != len(names):
            raise ValueError("need one name per sub-policy")
        if any(p.in_dim != OBS_DIM for p in policies):
            raise ValueError("sub-policies must observe the full environment observation")
        self.policies = list(policies)
        self.names = tuple(names)

    def __len__(self) -> int:
        return len(self.policies)

    def actions(self, obs) -> np.ndarray:
        """Deterministic means, shape ``(N, ..., act_dim)`` in fixed policy order."""
        return np.stack([p.mean(obs) for p in self.policies])

    def hashes(self) -> list[str]:
        return [policy_hash(p) for p in self.policies]


class BlendPolicy:
    """Gate network over parameter estimates plus the sub-policies it mixes."""

    def __init__(self, subs: SubPolicySet, rng: np.random.Generator | None = None,
                 gate: GaussianPolicy | None = None, init_weight: float = 1.0):
        self.subs = subs
        self.gate = gate if gate is not None else GaussianPolicy(
            PARAM_DIM, len(subs), rng, out_bias=init_weight)
        if self.gate.in_dim != PARAM_DIM or self.gate.out_dim != len(subs):
            raise ValueError("gate must map the parameter vector to one weight per sub-policy")

    def weights_mean(self, estimate) -> np.ndarray:
        return self.gate.mean(estimate)

    def act(self, obs, weights) -> np.ndarray:
        return blend_action(weights, self.subs.actions(obs))


def blend_step(blend: BlendPolicy, obs, estimate, rng: np.random.Generator, deterministic: bool = False):
    """Return ``(env action, weight log-prob, weights)`` for one observation."""
    est = np.asarray(estimate, float)
    if est.shape[-1] != PARAM_DIM:
        raise ValueError(f"estimate must have {PARAM_DIM} entries")
    mean = blend.gate.mean(est)
    if deterministic:
        w, logp = mean, 0.0
    else:
        w, logp = gaussian_sample(mean, blend.gate.log_std, rng)
    return blend.act(obs, w), logp, w


class BlendAgent:
    """PPO agent whose state is the estimate and whose action is the weight vector."""

    def __init__(self, blend: BlendPolicy, value: Mlp, estimator, env_config: EnvConfig | None = None,
                 training: bool = True, rng: np.random.Generator | None = None):
        self.blend = blend
        self.rng = rng if rng is not None else np.random.default_rng(0)
        self.policy = blend.gate
        self.value = value
        self.estimator = estimator
        self.env_config = env_config
        self.training = training
        self.estimates = np.zeros((0, PARAM_DIM))
        self.trace: list = []
        self.episode = 0

    def start_episodes(self, venv: VecEnv, params, rng: np.random.Generator) -> None:
        # estimator noise comes from the agent's own stream so episode draws stay aligned
        del rng
        ests = []
        for p in params:
            est = self.estimator.begin_episode(p, self.rng, self.env_config, self.training)
            ests.append(est)
            self.trace.append((self.episode, est, p.as_array()))
            self.episode += 1
        self.estimates = np.stack(ests)

    def policy_input(self, obs: np.ndarray) -> np.ndarray:
        # the gate never sees the observation
        return self.estimates

    def env_action(self, obs: np.ndarray, ppo_action: np.ndarray) -> np.ndarray:
        return self.blend.act(obs, ppo_action)


@dataclass
class BlendTrainResult:
    blend: BlendPolicy
    best_gate: GaussianPolicy
    estimator: object
    result: TrainResult

    @property
    def curve(self):
        return self.result.curve


def train_blend(subs: SubPolicySet, estimator_kind: str, config: PpoConfig, seed: int,
                env_config: EnvConfig | None = None, scenario: str = "combined",
                estimator_kw: dict | None = None) -> BlendTrainResult:
    """PPO on the gate with a live estimator refreshed at each episode boundary."""
    if estimator_kind not in ESTIMATOR_KINDS:
        raise ValueError(f"unknown estimator kind {estimator_kind!r}; expected one of {ESTIMATOR_KINDS}")
    env_config = env_config or EnvConfig()
    streams = seed_streams(seed, config.rollout_steps // env_config.horizon)
    init_rng = streams[0]
    blend = BlendPolicy(subs, init_rng)
    value = Mlp([PARAM_DIM, 64, 64, 1], init_rng, out_gain=1.0)
    estimator = make_estimator(estimator_kind, seed=seed, **(estimator_kw or {}))
    agent = BlendAgent(blend, value, estimator, env_config, training=True, rng=streams[5])
    result = train_agent(agent, scenario, config, seed, env_config, streams)
    return BlendTrainResult(blend, result.best_policy, estimator, result)


def save_bundle(path, gate_file: str, sub_files: list[str], estimator, extra: dict | None = None) -> None:
    payload = {"format_version": 1, "gate": gate_file, "sub_policies": list(sub_files),
               "sub_policy_order": list(SUB_POLICY_ORDER), "estimator_kind": estimator.kind,
               "estimator_state": estimator.to_dict()}
    if extra:
        payload.update(extra)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(payload, indent=1))

