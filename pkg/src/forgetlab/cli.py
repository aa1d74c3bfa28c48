"""Command line entry point: ``forgetlab <verb> [--plan P] [--out DIR] ...``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import runner
from .finetune import METHODS
from .runner import ExperimentPlan, Runner


def _plan(args) -> ExperimentPlan:
    stored = Path(args.out) / "plan.json"
    if args.plan:
        plan = ExperimentPlan.load(args.plan)
    elif stored.exists():
        plan = ExperimentPlan.load(stored)
    else:
        plan = runner.default_plan()
    if args.seed is not None and args.seed != plan.seed:
        plan = plan.with_seed(args.seed)
    return plan


def _methods(args, default) -> list[str]:
    if not args.methods:
        return list(default)
    chosen = [m.strip() for m in args.methods.split(",") if m.strip()]
    bad = [m for m in chosen if m not in METHODS]
    if bad:
        raise runner.PlanError(f"unknown methods {bad}")
    return chosen


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="forgetlab", description="Concept-forgetting experiments on synthetic tasks.")
    p.add_argument("verb", choices=("pretrain", "run", "sequence", "wiseft", "report", "verify", "plan"))
    p.add_argument("--plan", help="plan JSON (default: the built-in default plan)")
    p.add_argument("--out", default="runs", help="output directory (default: runs)")
    p.add_argument("--workers", type=int, default=1, help="parallel jobs (default: 1)")
    p.add_argument("--seed", type=int, help="override the plan seed")
    p.add_argument("--methods", help="comma-separated subset of methods")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    if args.verb == "verify":
        from .verify import run_checks

        return 0 if run_checks(sys.stdout) else 1
    try:
        plan = _plan(args)
        if args.verb == "plan":
            sys.stdout.write(plan.dumps() + "\n")
            return 0
        if args.verb == "report":
            sys.stdout.write(runner.write_report(plan, args.out).render_text(plan.plan_hash()))
            return 0
        r = Runner(plan, args.out, workers=args.workers)
        if args.verb == "pretrain":
            cfg = r.foundation.pretrain_config
            print(f"foundation ready in {Path(args.out) / runner.FOUNDATION_FILE} (gate zero-shot accuracy {cfg.get('gate_zs_accuracy', float('nan')):.2f}%)")
        elif args.verb == "run":
            keep = set(_methods(args, METHODS))
            res = r.run_single([j for j in plan.jobs if j.method in keep])
            print(f"{len(res)} single-task run(s) finished; metrics in {r.metrics_path}")
        elif args.verb == "sequence":
            res = r.run_sequences(_methods(args, plan.sequence_methods))
            print(f"{len(res)} sequence run(s) finished")
        elif args.verb == "wiseft":
            res = r.run_wise_ft(_methods(args, plan.wise_ft_methods))
            print(f"{len(res)} Wise-FT ablation(s) finished")
    except (runner.PlanError, runner.RegistryError, runner.JobError, FileNotFoundError) as exc:
        print(f"forgetlab: error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
