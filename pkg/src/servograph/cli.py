"""Command-line front end.

Subcommands: record, build-graph, run, exp-multipart, exp-goal,
exp-crosstask, eval-sim. One JSON config file carries the full parameter
schema (see ExperimentConfig); SERVOGRAPH_OUT_DIR overrides the output
directory. Exit codes: 0 success, 1 usage error, 2 experiment assertion
failure (for `run`, an unsuccessful episode outcome).
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import bank as bank_io
from .bank import MemoryBank, Scheme
from .errors import ServographError
from .experiments import (
    ExperimentConfig,
    eval_similarity,
    exp_crosstask,
    exp_goal,
    exp_multipart,
    goal_image_for,
    record_demos,
    trace_to_json,
)
from .planner import build_graph, dump_graph
from .servo import run_episode
from .simulator import ShapeKind, TaskKind, make_task

USAGE_ERROR = 1
ASSERTION_FAILURE = 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # usage errors exit 1, not argparse's 2
        self.print_usage(sys.stderr)
        raise SystemExit(USAGE_ERROR)


def _load_config(path: str | None) -> ExperimentConfig:
    return ExperimentConfig.from_json(path) if path else ExperimentConfig()


def _add_config_arg(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON experiment config (defaults used when omitted)")


def cmd_record(args) -> int:
    cfg = _load_config(args.config)
    sim_cfg = cfg.sim_config()
    log: list[str] = []
    trajs = record_demos(TaskKind(args.task), ShapeKind(args.shape), args.count, args.seed, sim_cfg, log)
    for line in log:
        print(line, file=sys.stderr)
    bank = MemoryBank(
        tuple(p for demo_id, t in trajs for p in bank_io.segment(t, Scheme(args.scheme), demo_id))
    )
    bank_io.save(bank, args.out)
    print(f"recorded {len(trajs)} demos -> {len(bank.parts)} parts at {args.out}")
    return 0


def cmd_build_graph(args) -> int:
    cfg = _load_config(args.config)
    bank = bank_io.load(args.bank)
    graph = build_graph(bank, cfg.score_config(), mode=cfg.mode())
    dump_graph(graph, args.out)
    print(f"graph over {len(graph.parts)} parts, {len(graph.edges)} edges, tau={graph.tau:.4f} -> {args.out}")
    return 0


def cmd_run(args) -> int:
    cfg = _load_config(args.config)
    sim_cfg = cfg.sim_config()
    bank = bank_io.load(args.bank)
    task = make_task(TaskKind(args.task), ShapeKind(args.shape), sim_cfg)
    goal = goal_world = None
    if args.goal_conditioned:
        goal, goal_world = goal_image_for(TaskKind(args.task), ShapeKind(args.shape), args.seed, sim_cfg)
    trace = run_episode(
        task,
        bank,
        cfg.score_config(),
        mode=cfg.mode(),
        goal=goal,
        goal_world=goal_world,
        seed=args.seed,
        servo_cfg=cfg.servo_config(),
        sim_cfg=sim_cfg,
        servo_backend=cfg.servo_backend(),
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "trace.json").write_text(json.dumps(trace_to_json(trace), indent=1) + "\n")
    print(f"outcome: {trace.outcome}")
    return 0 if trace.outcome and trace.outcome.success else ASSERTION_FAILURE


def _print_rows(rows) -> None:
    for row in rows:
        print(json.dumps(row))


def cmd_exp_multipart(args) -> int:
    rows = exp_multipart(_load_config(args.config))
    _print_rows(rows)
    if args.assert_trends:
        by = {(r["scheme"], r["demo_count"]): r["success_rate"] for r in rows}
        counts = sorted({r["demo_count"] for r in rows if r["scheme"] != "random_single_demo"})
        top = max(counts)
        ok = by[("3p", top)] >= by[("1p", top)] + 0.10 and by[("3p", top)] >= by[("3p", min(counts))]
        if not ok:
            print("multipart trend assertion failed", file=sys.stderr)
            return ASSERTION_FAILURE
    return 0


def cmd_exp_goal(args) -> int:
    rows = exp_goal(_load_config(args.config))
    _print_rows(rows)
    if args.assert_trends:
        by = {r["condition"]: r for r in rows}
        ok = (
            by["conditioned"]["success_rate"] >= by["unconditioned"]["success_rate"] + 0.15
            and abs(by["unconditioned"]["correct_shape_selection_rate"] - 0.5) <= 0.15
        )
        if not ok:
            print("goal-conditioning trend assertion failed", file=sys.stderr)
            return ASSERTION_FAILURE
    return 0


def cmd_exp_crosstask(args) -> int:
    rows = exp_crosstask(_load_config(args.config))
    _print_rows(rows)
    if args.assert_trends:
        by = {r["sorting_demos"]: r["success_rate"] for r in rows}
        top = max(k for k in by if k >= 0)
        if not by[top] >= by[-1] + 0.10:
            print("cross-task trend assertion failed", file=sys.stderr)
            return ASSERTION_FAILURE
    return 0


def cmd_eval_sim(args) -> int:
    rows = eval_similarity(_load_config(args.config))
    _print_rows(rows)
    if args.assert_trends:
        for row in rows:
            if row["exact_match_rank1_rate"] < 1.0:
                print(f"exact-match retrieval failed for {row['score_kind']}", file=sys.stderr)
                return ASSERTION_FAILURE
        fs = next(r for r in rows if r["score_kind"] == "fs")
        if not fs["top1_position_error_m"] <= fs["random_position_error_m"]:
            print("FS top-1 does not beat random selection", file=sys.stderr)
            return ASSERTION_FAILURE
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="servograph", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("record", help="record scripted demos into a bank")
    p.add_argument("--task", default="shape_sorting", choices=[t.value for t in TaskKind])
    p.add_argument("--shape", default="trapeze", choices=[s.value for s in ShapeKind])
    p.add_argument("--count", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--scheme", default="3p", choices=[s.value for s in Scheme])
    p.add_argument("--out", required=True)
    _add_config_arg(p)
    p.set_defaults(func=cmd_record)

    p = sub.add_parser("build-graph", help="score a bank into a demonstration graph dump")
    p.add_argument("--bank", required=True)
    p.add_argument("--out", required=True)
    _add_config_arg(p)
    p.set_defaults(func=cmd_build_graph)

    p = sub.add_parser("run", help="run one seeded episode with a trace dump")
    p.add_argument("--bank", required=True)
    p.add_argument("--task", default="shape_sorting", choices=[t.value for t in TaskKind])
    p.add_argument("--shape", default="trapeze", choices=[s.value for s in ShapeKind])
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--goal-conditioned", action="store_true")
    p.add_argument("--out", required=True)
    _add_config_arg(p)
    p.set_defaults(func=cmd_run)

    for name, func in (
        ("exp-multipart", cmd_exp_multipart),
        ("exp-goal", cmd_exp_goal),
        ("exp-crosstask", cmd_exp_crosstask),
        ("eval-sim", cmd_eval_sim),
    ):
        p = sub.add_parser(name, help=f"{name.replace('-', ' ')} experiment suite")
        p.add_argument("--assert-trends", action="store_true")
        _add_config_arg(p)
        p.set_defaults(func=func)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except ServographError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return USAGE_ERROR
    except (FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return USAGE_ERROR


if __name__ == "__main__":
    sys.exit(main())
