"""Command line entry point: ``blendsys <subcommand> [options]``."""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import harness
from .blending import SUB_POLICY_ORDER
from .env import SCENARIOS
from .selftest import run_all


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seed", type=int, default=None, help="seed (default: every config seed; eval: eval_seed)")
    p.add_argument("--config", type=Path, default=None, help="experiment JSON config")
    p.add_argument("--out", type=Path, default=Path("runs"), help="output directory (default: runs)")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="blendsys", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train-sub", help="train one single-impairment sub-policy")
    p.add_argument("--impairment", required=True, choices=SUB_POLICY_ORDER)
    _common(p)
    p = sub.add_parser("train-dr", help="train the domain-randomisation baseline")
    _common(p)
    p = sub.add_parser("train-blend", help="train the blending gate with a sysid method")
    p.add_argument("--sysid", required=True, choices=harness.BLEND_METHODS)
    _common(p)
    p = sub.add_parser("eval", help="100-episode cumulative-force evaluation")
    p.add_argument("--method", required=True, help="dr, ukf, spm, perfect or sub:<impairment>")
    p.add_argument("--scenario", required=True, choices=SCENARIOS)
    p.add_argument("--train-seed", type=int, default=None,
                   help="checkpoint seed (default: the seed with the highest training reward)")
    p.add_argument("--episodes", type=int, default=None)
    _common(p)
    p = sub.add_parser("report", help="aggregate eval results into table/box/raw CSVs")
    _common(p)
    p = sub.add_parser("pipeline", help="train everything, evaluate all methods and scenarios, report")
    _common(p)
    p = sub.add_parser("selftest", help="run the fast oracle checks")
    _common(p)
    return parser


def _seeds(args, config) -> list[int]:
    return [args.seed] if args.seed is not None else list(config.seeds)


def run(args) -> int:
    config = harness.ExperimentConfig.load(args.config) if args.config else harness.ExperimentConfig()
    out = args.out
    cmd = args.command
    if cmd == "selftest":
        return 0 if run_all() else 1
    if cmd == "train-sub":
        for s in _seeds(args, config):
            print(harness.train_sub(config, args.impairment, s, out))
    elif cmd == "train-dr":
        for s in _seeds(args, config):
            print(harness.train_dr(config, s, out))
    elif cmd == "train-blend":
        for s in _seeds(args, config):
            print(harness.train_blend_run(config, args.sysid, s, out))
    elif cmd == "eval":
        rep = harness.evaluate(config, args.method, args.scenario, out, args.seed, args.train_seed, args.episodes)
        print(f"{rep.method} {rep.scenario} mean={rep.stats['mean']:.3f} stdev={rep.stats['stdev']:.3f}")
    elif cmd == "report":
        reports = harness.collect_reports(out)
        if not reports:
            raise FileNotFoundError(f"no evaluation reports under {out / 'eval'}")
        for path in harness.report(reports, out / "report").values():
            print(path)
    elif cmd == "pipeline":
        if args.seed is not None:
            config.seeds = [args.seed]
        for r in harness.run_pipeline(config, out):
            print(f"{r.method:8s} {r.scenario:12s} mean={r.stats['mean']:.3f} stdev={r.stats['stdev']:.3f}")
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        return run(args)
    except Exception as exc:  # one-line diagnostic, nonzero exit
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
