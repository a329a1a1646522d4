"""Experiment orchestration: training pipelines, evaluation, statistics and CSV reports.

Output layout under ``out``::

    sub/<impairment>/seed<k>/   policy_best.json policy_final.json value.json curve.csv
    dr/seed<k>/                 same files
    blend/<sysid>/seed<k>/      gate_best.json gate_final.json value.json bundle.json
                                curve.csv estimates.csv
    eval/<method>/<scenario>/   report.json raw.csv
    report/                     table.csv box.csv raw.csv

Every command also drops a ``manifest.json`` next to what it wrote.
"""
from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import statistics
import subprocess
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .blending import SUB_POLICY_ORDER, BlendAgent, BlendPolicy, SubPolicySet, policy_hash, save_bundle, train_blend
from .env import OBS_DIM, SCENARIOS, EnvConfig, VecEnv
from .nn import Mlp, load_checkpoint, save_checkpoint
from .ppo import DirectAgent, PpoConfig, collect_rollout, train
from .sysid import ESTIMATOR_KINDS, estimator_from_dict, write_estimate_trace

log = logging.getLogger(__name__)

BLEND_METHODS = ESTIMATOR_KINDS
METHODS = ("dr", *BLEND_METHODS)
EVAL_SCENARIOS = ("combined", "involuntary", "weak", "limited")


class MissingCheckpoint(FileNotFoundError):
    pass


@dataclass
class ExperimentConfig:
    seeds: list = field(default_factory=lambda: [0, 1, 2])
    eval_seed: int = 0
    eval_episodes: int = 100
    sub_steps: int = 300_000
    dr_steps: int = 300_000
    blend_steps: int = 100_000
    budget_scale: float = 1.0
    ppo: dict = field(default_factory=dict)
    env: dict = field(default_factory=dict)
    sysid: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.seeds:
            raise ValueError("seed list must be nonempty")
        if self.eval_episodes <= 0:
            raise ValueError("eval_episodes must be positive")

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        data = json.loads(Path(path).read_text())
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**data)

    def to_dict(self) -> dict:
        return asdict(self)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]

    def env_config(self) -> EnvConfig:
        return EnvConfig.from_dict(self.env)

    def ppo_config(self, budget: int) -> PpoConfig:
        cfg = PpoConfig.from_dict(self.ppo)
        steps = int(round(budget * self.budget_scale))
        cfg.total_steps = max(cfg.rollout_steps, steps - steps % cfg.rollout_steps)
        cfg.validate(self.env_config().horizon)
        return cfg


def parse_method(method: str) -> tuple[str, str | None]:
    """``dr``/``ukf``/``spm``/``perfect`` or ``sub:<impairment>``."""
    if method in METHODS:
        return method, None
    if method.startswith("sub:") and method[4:] in SUB_POLICY_ORDER:
        return "sub", method[4:]
    raise ValueError(f"invalid method {method!r}; expected one of {METHODS} or sub:<{'|'.join(SUB_POLICY_ORDER)}>")


def _git_describe() -> str:
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty"], capture_output=True,
                             text=True, timeout=5, cwd=Path(__file__).parent)
        return out.stdout.strip() or "unknown"
    except (OSError, subprocess.SubprocessError):
        return "unknown"


def write_manifest(directory, config: ExperimentConfig, seed: int, command: str, started: float,
                   extra: dict | None = None) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    manifest = {"command": command, "git_describe": _git_describe(), "config_hash": config.digest(),
                "seed": seed, "wall_clock_s": round(time.time() - started, 3), **(extra or {})}
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))


# --- training -------------------------------------------------------------

def _save_policy_run(run_dir: Path, result, kind: str) -> None:
    extra = {"best_score": result.best_score}
    save_checkpoint(run_dir / "policy_best.json", kind, result.best_policy, extra=extra)
    save_checkpoint(run_dir / "policy_final.json", kind, result.agent.policy, extra=extra)
    save_checkpoint(run_dir / "value.json", kind + "-value", result.agent.value)
    result.curve.write_csv(run_dir / "curve.csv")


def train_sub(config: ExperimentConfig, impairment: str, seed: int, out) -> Path:
    if impairment not in SUB_POLICY_ORDER:
        raise ValueError(f"unknown impairment {impairment!r}")
    started = time.time()
    run_dir = Path(out) / "sub" / impairment / f"seed{seed}"
    result = train(impairment, config.ppo_config(config.sub_steps), seed, config.env_config())
    _save_policy_run(run_dir, result, f"sub:{impairment}")
    write_manifest(run_dir, config, seed, f"train-sub {impairment}", started)
    return run_dir


def train_dr(config: ExperimentConfig, seed: int, out):
    """Observation-conditioned PPO under uniform domain randomisation."""
    started = time.time()
    run_dir = Path(out) / "dr" / f"seed{seed}"
    result = train("dr", config.ppo_config(config.dr_steps), seed, config.env_config())
    _save_policy_run(run_dir, result, "dr")
    write_manifest(run_dir, config, seed, "train-dr", started)
    return run_dir


def sub_policy_files(out, seed: int) -> list[Path]:
    files = [Path(out) / "sub" / name / f"seed{seed}" / "policy_best.json" for name in SUB_POLICY_ORDER]
    for f in files:
        if not f.exists():
            raise MissingCheckpoint(f"missing checkpoint: {f}")
    return files


def load_sub_policies(files) -> SubPolicySet:
    return SubPolicySet([load_checkpoint(f)[0] for f in files])


def train_blend_run(config: ExperimentConfig, sysid: str, seed: int, out) -> Path:
    if sysid not in BLEND_METHODS:
        raise ValueError(f"unknown sysid {sysid!r}; expected one of {BLEND_METHODS}")
    started = time.time()
    out = Path(out)
    files = sub_policy_files(out, seed)
    subs = load_sub_policies(files)
    hashes_before = subs.hashes()
    res = train_blend(subs, sysid, config.ppo_config(config.blend_steps), seed,
                      config.env_config(), estimator_kw=config.sysid.get(sysid, {}))
    if subs.hashes() != hashes_before:
        raise RuntimeError("sub-policies changed during blending training")
    run_dir = out / "blend" / sysid / f"seed{seed}"
    extra = {"best_score": res.result.best_score}
    save_checkpoint(run_dir / "gate_best.json", f"gate:{sysid}", res.best_gate, extra=extra)
    save_checkpoint(run_dir / "gate_final.json", f"gate:{sysid}", res.blend.gate, extra=extra)
    save_checkpoint(run_dir / "value.json", "gate-value", res.result.agent.value)
    res.curve.write_csv(run_dir / "curve.csv")
    write_estimate_trace(run_dir / "estimates.csv", res.result.agent.trace)
    rel = [str(f.relative_to(out)) for f in files]
    save_bundle(run_dir / "bundle.json", "gate_best.json", rel, res.estimator,
                {"sub_policy_hashes": hashes_before, "best_score": res.result.best_score})
    write_manifest(run_dir, config, seed, f"train-blend {sysid}", started)
    return run_dir


# --- evaluation -----------------------------------------------------------

def nearest_rank(sorted_values, p: float) -> float:
    n = len(sorted_values)
    k = max(1, math.ceil(p * n))
    return float(sorted_values[k - 1])


def summarize(values) -> dict:
    vals = [float(v) for v in values]
    s = sorted(vals)
    return {
        "mean": statistics.fmean(vals),
        "stdev": statistics.stdev(vals) if len(vals) > 1 else 0.0,
        "min": s[0], "q1": nearest_rank(s, 0.25), "median": nearest_rank(s, 0.5),
        "q3": nearest_rank(s, 0.75), "max": s[-1],
    }


@dataclass
class EvalReport:
    method: str
    scenario: str
    seed: int
    forces: list
    stats: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.stats:
            self.stats = summarize(self.forces)

    def consistent(self) -> bool:
        return summarize(self.forces) == self.stats

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        return cls(d["method"], d["scenario"], int(d["seed"]), [float(x) for x in d["forces"]], d["stats"])

    def save(self, directory) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        (directory / "report.json").write_text(json.dumps(self.to_dict(), indent=1))
        write_raw_csv(directory / "raw.csv", [self])

    @classmethod
    def load(cls, path) -> "EvalReport":
        return cls.from_dict(json.loads(Path(path).read_text()))


def _best_seed_dir(parent: Path, ckpt_name: str, train_seed: int | None) -> Path:
    if train_seed is not None:
        d = parent / f"seed{train_seed}"
        if not (d / ckpt_name).exists():
            raise MissingCheckpoint(f"missing checkpoint: {d / ckpt_name}")
        return d
    candidates = sorted(parent.glob(f"seed*/{ckpt_name}"))
    if not candidates:
        raise MissingCheckpoint(f"missing checkpoint: {parent}/seed*/{ckpt_name}")
    # highest best-by-moving-average score; ties broken by path order
    scores = [json.loads(c.read_text()).get("extra", {}).get("best_score", -math.inf) for c in candidates]
    return candidates[int(np.argmax(scores))].parent


def load_eval_agent(method: str, out, train_seed: int | None = None, env_config: EnvConfig | None = None):
    """Build a frozen agent for ``method`` from checkpoints under ``out``."""
    out = Path(out)
    kind, name = parse_method(method)
    if kind in ("dr", "sub"):
        parent = out / "dr" if kind == "dr" else out / "sub" / name
        d = _best_seed_dir(parent, "policy_best.json", train_seed)
        policy, _ = load_checkpoint(d / "policy_best.json")
        return DirectAgent(policy, Mlp([OBS_DIM, 1])), [policy]
    d = _best_seed_dir(out / "blend" / kind, "bundle.json", train_seed)
    bundle = json.loads((d / "bundle.json").read_text())
    sub_files = [out / f for f in bundle["sub_policies"]]
    for f in sub_files:
        if not f.exists():
            raise MissingCheckpoint(f"missing checkpoint: {f}")
    subs = load_sub_policies(sub_files)
    gate, _ = load_checkpoint(d / bundle["gate"])
    estimator = estimator_from_dict(bundle["estimator_state"])
    blend = BlendPolicy(subs, gate=gate)
    agent = BlendAgent(blend, Mlp([gate.in_dim, 1]), estimator, env_config, training=False)
    return agent, [gate, *subs.policies]


def eval_streams(seed: int, n: int):
    ss = np.random.SeedSequence([int(seed), 0xE7A1])
    params, actions, envs, estimator = ss.spawn(4)
    return (np.random.default_rng(params), np.random.default_rng(actions),
            [np.random.default_rng(s) for s in envs.spawn(n)], np.random.default_rng(estimator))


def evaluate_agent(agent, method: str, scenario: str, n_episodes: int, seed: int,
                   env_config: EnvConfig | None = None) -> EvalReport:
    """Deterministic (mean-action) rollouts, one fresh human per episode."""
    if scenario not in SCENARIOS:
        raise ValueError(f"invalid scenario {scenario!r}")
    env_config = env_config or EnvConfig()
    param_rng, action_rng, env_rngs, est_rng = eval_streams(seed, n_episodes)
    if isinstance(agent, BlendAgent):
        agent.rng = est_rng
        agent.env_config = env_config
    venv = VecEnv(env_rngs, env_config)
    buf = collect_rollout(venv, agent, scenario, n_episodes * env_config.horizon, param_rng,
                          action_rng, deterministic=True)
    return EvalReport(method, scenario, seed, [float(f) for f in buf.episode_forces])


def evaluate(config: ExperimentConfig, method: str, scenario: str, out, seed: int | None = None,
             train_seed: int | None = None, n_episodes: int | None = None) -> EvalReport:
    started = time.time()
    parse_method(method)
    if scenario not in SCENARIOS:
        raise ValueError(f"invalid scenario {scenario!r}")
    seed = config.eval_seed if seed is None else seed
    n_episodes = n_episodes or config.eval_episodes
    env_config = config.env_config()
    agent, policies = load_eval_agent(method, out, train_seed, env_config)
    before = [policy_hash(p) for p in policies]
    report = evaluate_agent(agent, method, scenario, n_episodes, seed, env_config)
    if [policy_hash(p) for p in policies] != before:
        raise RuntimeError("policy parameters changed during evaluation")
    eval_dir = Path(out) / "eval" / method.replace(":", "_") / scenario
    report.save(eval_dir)
    write_manifest(eval_dir, config, seed, f"eval {method} {scenario}", started)
    return report


# --- reporting ------------------------------------------------------------

def _sorted(reports):
    return sorted(reports, key=lambda r: (r.scenario, r.method))


def write_raw_csv(path, reports) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["method", "scenario", "episode", "force"])
        for r in _sorted(reports):
            for i, f in enumerate(r.forces):
                w.writerow([r.method, r.scenario, i, repr(f)])


def report(reports, out_dir) -> dict:
    """Write table.csv, box.csv and raw.csv; rows sorted by (scenario, method)."""
    if not reports:
        raise ValueError("report needs at least one evaluation")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = _sorted(reports)
    with (out_dir / "table.csv").open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["method", "scenario", "mean", "stdev"])
        for r in rows:
            w.writerow([r.method, r.scenario, repr(r.stats["mean"]), repr(r.stats["stdev"])])
    with (out_dir / "box.csv").open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["method", "scenario", "min", "q1", "median", "q3", "max"])
        for r in rows:
            w.writerow([r.method, r.scenario] + [repr(r.stats[k]) for k in ("min", "q1", "median", "q3", "max")])
    write_raw_csv(out_dir / "raw.csv", rows)
    return {"table": out_dir / "table.csv", "box": out_dir / "box.csv", "raw": out_dir / "raw.csv"}


def collect_reports(out) -> list[EvalReport]:
    return [EvalReport.load(p) for p in sorted(Path(out).glob("eval/*/*/report.json"))]


def read_table(path) -> list[dict]:
    with Path(path).open(newline="") as fh:
        return [{**row, "mean": float(row["mean"]), "stdev": float(row["stdev"])} for row in csv.DictReader(fh)]


def run_pipeline(config: ExperimentConfig, out, methods=METHODS, scenarios=EVAL_SCENARIOS) -> list[EvalReport]:
    """Train every sub-policy, the DR baseline and all blends; evaluate; report."""
    out = Path(out)
    for seed in config.seeds:
        for imp in SUB_POLICY_ORDER:
            train_sub(config, imp, seed, out)
        if "dr" in methods:
            train_dr(config, seed, out)
        for kind in BLEND_METHODS:
            if kind in methods:
                train_blend_run(config, kind, seed, out)
    reports = [evaluate(config, m, s, out) for m in methods for s in scenarios]
    report(reports, out / "report")
    return reports
