"""Command-line entry point: gen-data, train, eval, sweep, gradcheck.

Exit codes: 0 success, 1 contract/config error, 2 I/O or file-format error.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .data import generate, load_dataset, save_dataset, selector_for, split
from .exceptions import FormatError, RcermError
from .gradcheck import run_suite
from .selection import accuracy
from .sweep import SweepPlan, run_sweep
from .trainer import TrainConfig, load_checkpoint, train_run


class _Parser(argparse.ArgumentParser):
    """argparse that exits 1 (not 2) on bad flags, per the CLI contract."""

    def error(self, message: str):
        self.print_usage(sys.stderr)
        print(f"error: {message}", file=sys.stderr)
        raise SystemExit(1)


def build_parser() -> _Parser:
    parser = _Parser(prog="rcerm", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", help="generate the synthetic multi-domain dataset")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--n-per-cell", type=int, default=100)

    p = sub.add_parser("train", help="run one training job")
    p.add_argument("--config", required=True, help="JSON file mirroring TrainConfig")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None, help="override the config seed")

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", required=True, choices=("train", "val", "test"))
    p.add_argument("--seed", type=int, default=None,
                   help="accepted for interface uniformity; evaluation is deterministic")

    p = sub.add_parser("sweep", help="run a sweep plan and the selection criteria")
    p.add_argument("--plan", required=True, help="JSON sweep plan")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--parallel", type=int, default=1)
    p.add_argument("--seed", type=int, default=None,
                   help="accepted for interface uniformity; seeds come from the plan")

    p = sub.add_parser("gradcheck", help="run the finite-difference gradient suite")
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.add_argument("--points", type=int, default=100, help="random points per primitive")
    p.add_argument("--seed", type=int, default=0)
    return parser


def _load_json(path: str) -> dict:
    p = Path(path)
    if not p.is_file():
        raise FormatError(f"{path}: no such file")
    try:
        return json.loads(p.read_text())
    except json.JSONDecodeError as err:
        raise FormatError(f"{path}: invalid JSON ({err})") from None


def _cmd_gen_data(args) -> int:
    dataset = generate(seed=args.seed, n_per_cell=args.n_per_cell)
    save_dataset(dataset, args.out)
    print(f"wrote dataset: {dataset.n_classes} classes x {dataset.n_domains} domains "
          f"x {dataset.n_per_cell} examples to {args.out}")
    return 0


def _cmd_train(args) -> int:
    config = TrainConfig.from_dict(_load_json(args.config))
    if args.seed is not None:
        config.seed = args.seed
        config.validate()
    dataset = load_dataset(args.data)
    record = train_run(config, dataset, args.out)
    print(f"trained {config.algorithm} for {config.steps} steps: "
          f"acc_train={record.acc_train:.4f} acc_val={record.acc_val:.4f} "
          f"acc_test={record.acc_test:.4f}")
    return 0


def _cmd_eval(args) -> int:
    bundle, config, _step = load_checkpoint(args.checkpoint)
    dataset = load_dataset(args.data)
    plan = dataset.split_plan
    if plan is None or plan.holdout_domain != config.holdout_domain:
        plan = split(dataset, config.holdout_domain, small_frac=config.small_frac,
                     seed=config.seed)
    if args.split == "train":
        selector = selector_for(dataset, plan, "big", domains=config.train_domains)
    elif args.split == "val":
        selector = selector_for(dataset, plan, "small", domains=config.train_domains)
    else:
        selector = selector_for(dataset, plan, "all", domains=[config.holdout_domain])
    acc = accuracy(bundle, dataset.examples(selector))
    print(f"accuracy={acc:.6f}")
    return 0


def _cmd_sweep(args) -> int:
    plan = SweepPlan.from_dict(_load_json(args.plan))
    dataset = load_dataset(args.data)
    report = run_sweep(plan, dataset, args.out, parallel=max(1, args.parallel))
    print(f"sweep finished: {report['n_completed']}/{report['n_trials']} trials, "
          f"{len(report['failures'])} failures; report in {args.out}")
    return 0 if not report["failures"] else 1


def _cmd_gradcheck(args) -> int:
    worst, _checks = run_suite(seed=args.seed, points_per_op=args.points,
                               tolerance=args.tolerance, verbose=True)
    return 0 if worst <= args.tolerance else 1


_COMMANDS = {
    "gen-data": _cmd_gen_data,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "sweep": _cmd_sweep,
    "gradcheck": _cmd_gradcheck,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as err:
        return int(err.code or 0)
    try:
        return _COMMANDS[args.command](args)
    except (FormatError, OSError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    except (RcermError, IndexError, KeyError, ValueError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
