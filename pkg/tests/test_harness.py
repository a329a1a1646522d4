import csv
import json
import math

import numpy as np
import pytest

from blendsys import harness
from blendsys.cli import main
from blendsys.env import OBS_DIM, ik_tracking_action
from blendsys.harness import EvalReport, ExperimentConfig, evaluate_agent, nearest_rank, report, summarize
from blendsys.nn import GaussianPolicy, Mlp, load_checkpoint
from blendsys.ppo import DirectAgent

TINY = {"seeds": [0], "sub_steps": 400, "dr_steps": 400, "blend_steps": 400, "eval_episodes": 10,
        "ppo": {"rollout_steps": 400, "minibatch": 200, "epochs": 1}}


@pytest.fixture
def tiny_config(tmp_path):
    path = tmp_path / "tiny.json"
    path.write_text(json.dumps(TINY))
    return path


@pytest.fixture
def trained(tmp_path, tiny_config):
    out = tmp_path / "run"
    for imp in ("involuntary", "weak", "limited"):
        assert main(["train-sub", "--impairment", imp, "--config", str(tiny_config), "--out", str(out)]) == 0
    assert main(["train-dr", "--config", str(tiny_config), "--out", str(out)]) == 0
    assert main(["train-blend", "--sysid", "ukf", "--config", str(tiny_config), "--out", str(out)]) == 0
    return out


class ScriptedPolicy:
    """Policy-shaped wrapper around a fixed controller."""

    def __init__(self, fn):
        self.fn = fn
        self.in_dim, self.out_dim = OBS_DIM, 2
        self.log_std = np.full(2, -5.0)

    def mean(self, x):
        return self.fn(x)


def scripted_agent(fn):
    return DirectAgent(ScriptedPolicy(fn), Mlp([OBS_DIM, 1]))


class TestStatistics:
    def test_nearest_rank_quartiles(self):
        s = summarize([1, 2, 3, 4, 5])
        assert (s["q1"], s["median"], s["q3"]) == (2.0, 3.0, 4.0)
        assert (s["min"], s["max"], s["mean"]) == (1.0, 5.0, 3.0)
        assert nearest_rank([7.0], 0.25) == 7.0

    def test_recomputed_stats_match(self, rng):
        rep = EvalReport("ukf", "combined", 0, rng.uniform(0, 500, 100).tolist())
        assert rep.consistent()
        back = EvalReport.from_dict(json.loads(json.dumps(rep.to_dict())))
        assert back.consistent() and back.stats == rep.stats


class TestReport:
    def test_single_report(self, tmp_path):
        rep = EvalReport("dr", "weak", 0, [1.5, 2.25, 3.0])
        paths = report([rep], tmp_path)
        rows = list(csv.DictReader(paths["table"].open()))
        assert len(rows) == 1
        assert float(rows[0]["mean"]) == rep.stats["mean"] and float(rows[0]["stdev"]) == rep.stats["stdev"]

    def test_sorted_and_roundtrip(self, tmp_path, rng):
        reps = [EvalReport(m, s, 0, rng.uniform(0, 100, 7).tolist())
                for m in ("ukf", "dr", "perfect") for s in ("weak", "combined")]
        paths = report(reps, tmp_path)
        table = list(csv.DictReader(paths["table"].open()))
        keys = [(r["scenario"], r["method"]) for r in table]
        assert keys == sorted(keys)
        lookup = {(r.scenario, r.method): r for r in reps}
        for row in table:
            r = lookup[(row["scenario"], row["method"])]
            assert float(row["mean"]) == r.stats["mean"] and float(row["stdev"]) == r.stats["stdev"]
        for row in csv.DictReader(paths["box"].open()):
            r = lookup[(row["scenario"], row["method"])]
            assert all(float(row[k]) == r.stats[k] for k in ("min", "q1", "median", "q3", "max"))
        raw = list(csv.DictReader(paths["raw"].open()))
        for row in raw:
            assert float(row["force"]) == lookup[(row["scenario"], row["method"])].forces[int(row["episode"])]
        assert len(raw) == 6 * 7

    def test_empty(self, tmp_path):
        with pytest.raises(ValueError):
            report([], tmp_path)


class TestEvaluation:
    def test_zero_action_has_zero_force(self):
        for scenario in ("combined", "involuntary", "weak", "limited", "dr", "none"):
            rep = evaluate_agent(scripted_agent(lambda x: np.zeros((len(x), 2))), "zero", scenario, 20, 0)
            assert rep.forces == [0.0] * 20

    def test_ik_oracle_makes_contact(self):
        rep = evaluate_agent(scripted_agent(ik_tracking_action), "ik", "none", 10, 0)
        assert rep.stats["mean"] > 0

    def test_seed_isolation(self, rng):
        pol = GaussianPolicy(OBS_DIM, 2, rng, out_gain=1.0)
        agent = DirectAgent(pol, Mlp([OBS_DIM, 1]))
        a = evaluate_agent(scripted_agent(ik_tracking_action), "ik", "combined", 10, 1)
        b = evaluate_agent(scripted_agent(ik_tracking_action), "ik", "combined", 10, 1)
        c = evaluate_agent(scripted_agent(ik_tracking_action), "ik", "combined", 10, 2)
        assert a.forces == b.forces and a.forces != c.forces
        assert evaluate_agent(agent, "x", "weak", 5, 0).forces == evaluate_agent(agent, "x", "weak", 5, 0).forces

    def test_invalid_method_and_scenario(self, tmp_path):
        with pytest.raises(ValueError, match="invalid method"):
            harness.evaluate(ExperimentConfig(), "sub:sleepy", "combined", tmp_path)
        with pytest.raises(ValueError, match="invalid scenario"):
            harness.evaluate(ExperimentConfig(), "dr", "windy", tmp_path)


class TestCli:
    def test_selftest(self, capsys):
        assert main(["selftest"]) == 0
        assert "FAIL" not in capsys.readouterr().out

    def test_eval_without_checkpoints(self, tmp_path, capsys):
        assert main(["eval", "--method", "ukf", "--scenario", "combined", "--out", str(tmp_path)]) != 0
        err = capsys.readouterr().err
        assert "missing checkpoint" in err and err.count("\n") == 1

    def test_unknown_flag(self, capsys):
        with pytest.raises(SystemExit) as exc:
            main(["train-dr", "--bogus"])
        assert exc.value.code == 2
        assert "usage" in capsys.readouterr().err

    def test_blend_needs_subpolicies(self, tmp_path, tiny_config, capsys):
        assert main(["train-blend", "--sysid", "spm", "--config", str(tiny_config), "--out", str(tmp_path)]) == 1
        assert "missing checkpoint" in capsys.readouterr().err

    def test_end_to_end(self, trained, tiny_config):
        out = trained
        for method in ("ukf", "dr", "sub:weak"):
            assert main(["eval", "--method", method, "--scenario", "combined",
                         "--config", str(tiny_config), "--out", str(out)]) == 0
        assert main(["report", "--out", str(out)]) == 0
        for name in ("table.csv", "box.csv", "raw.csv"):
            assert (out / "report" / name).exists()
        table = harness.read_table(out / "report" / "table.csv")
        assert sorted(r["method"] for r in table) == ["dr", "sub:weak", "ukf"]
        bundle = json.loads((out / "blend" / "ukf" / "seed0" / "bundle.json").read_text())
        assert bundle["estimator_kind"] == "ukf"
        assert bundle["sub_policies"][0].endswith("involuntary/seed0/policy_best.json")
        manifest = json.loads((out / "eval" / "ukf" / "combined" / "manifest.json").read_text())
        assert {"git_describe", "config_hash", "seed", "wall_clock_s"} <= set(manifest)
        trace = list(csv.DictReader((out / "blend" / "ukf" / "seed0" / "estimates.csv").open()))
        assert len(trace) == 4 * 2

    def test_state_spaces(self, trained):
        dr, _ = load_checkpoint(trained / "dr" / "seed0" / "policy_best.json")
        gate, _ = load_checkpoint(trained / "blend" / "ukf" / "seed0" / "gate_best.json")
        assert dr.in_dim == OBS_DIM == 14 and gate.in_dim == 4 and gate.out_dim == 3

    def test_evaluation_is_training_free(self, trained):
        files = sorted(trained.glob("**/*.json"))
        before = {f: f.read_bytes() for f in files if "eval" not in f.parts}
        harness.evaluate(ExperimentConfig(**TINY), "ukf", "weak", trained)
        for f, data in before.items():
            assert f.read_bytes() == data

    def test_commands_reproduce_bit_for_bit(self, tmp_path, tiny_config):
        outs = [tmp_path / "a", tmp_path / "b"]
        for out in outs:
            for imp in ("involuntary", "weak", "limited"):
                main(["train-sub", "--impairment", imp, "--seed", "1", "--config", str(tiny_config), "--out", str(out)])
            main(["train-dr", "--seed", "1", "--config", str(tiny_config), "--out", str(out)])
            main(["train-blend", "--sysid", "spm", "--seed", "1", "--config", str(tiny_config), "--out", str(out)])
            main(["eval", "--method", "spm", "--scenario", "limited", "--seed", "4",
                  "--config", str(tiny_config), "--out", str(out)])
        csvs = sorted(p.relative_to(outs[0]) for p in outs[0].glob("**/*.csv"))
        assert len(csvs) == 7
        for rel in csvs:
            assert (outs[0] / rel).read_bytes() == (outs[1] / rel).read_bytes(), rel


class TestConfig:
    def test_load_and_digest(self, tiny_config):
        cfg = ExperimentConfig.load(tiny_config)
        assert cfg.seeds == [0] and cfg.ppo_config(cfg.sub_steps).total_steps == 400
        assert cfg.digest() == ExperimentConfig.load(tiny_config).digest()
        assert cfg.digest() != ExperimentConfig().digest()

    def test_rejects_bad_config(self, tmp_path):
        p = tmp_path / "bad.json"
        p.write_text(json.dumps({"sedes": [1]}))
        with pytest.raises(ValueError, match="unknown config keys"):
            ExperimentConfig.load(p)
        with pytest.raises(ValueError):
            ExperimentConfig(seeds=[])

    def test_budget_scale(self):
        cfg = ExperimentConfig(budget_scale=0.5)
        assert cfg.ppo_config(cfg.sub_steps).total_steps == 148_000
        assert ExperimentConfig().ppo_config(100_000).total_steps == 100_000
        assert math.isclose(ExperimentConfig().ppo_config(300_000).gamma, 0.99)

    def test_parse_method(self):
        assert harness.parse_method("sub:limited") == ("sub", "limited")
        assert harness.parse_method("perfect") == ("perfect", None)
        with pytest.raises(ValueError):
            harness.parse_method("sub")
