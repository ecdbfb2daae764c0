"""Command line interface.

Subcommands: pretrain, adapt-eval, count, align, suite. Exit codes:
0 success, 2 configuration error, 3 data error, 4 training failure.
"""
from __future__ import annotations

import argparse
import json
import sys

from . import runner
from .adapters import METHODS
from .config import load_config
from .errors import ConfigurationError, DataError, SkillRouteError, \
    TrainingError

EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_TRAINING = 4


def _add_config_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", default=None, help="TOML config file")
    p.add_argument("--set", dest="overrides", action="append", default=[],
                   metavar="KEY=VALUE",
                   help="dotted override, e.g. strategy.num_heads=4")
    p.add_argument("--output-dir", default=None,
                   help="override the output directory")


def _load(args) -> "object":
    cfg = load_config(args.config, args.overrides)
    if args.output_dir:
        cfg.output_dir = args.output_dir
    return cfg


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="skillroute",
        description="modular skill adapters on a frozen transformer")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("pretrain", help="multi-task pre-training")
    _add_config_args(p)
    p.add_argument("--dry-run", action="store_true",
                   help="print the parameter budget and exit")

    p = sub.add_parser("adapt-eval",
                       help="few-shot adapt and evaluate on test tasks")
    _add_config_args(p)
    p.add_argument("--checkpoint", required=True,
                   help="checkpoint directory from pretrain")

    p = sub.add_parser("count", help="parameter accountant")
    p.add_argument("--method", required=True, choices=sorted(METHODS))
    p.add_argument("--d", type=int, required=True, help="model width")
    p.add_argument("--r", type=int, required=True, help="adapter rank")
    p.add_argument("--skills", type=int, default=8)
    p.add_argument("--tasks", type=int, default=20)
    p.add_argument("--heads", type=int, default=8)
    p.add_argument("--sites", type=int, default=1,
                   help="adapted sites; whole-model = per-layer * sites")

    p = sub.add_parser("align", help="pairwise task gradient alignment")
    _add_config_args(p)
    p.add_argument("--checkpoint", required=True)

    p = sub.add_parser("suite", help="pretrain+adapt+eval several strategies")
    _add_config_args(p)
    return parser


def cmd_pretrain(args) -> int:
    cfg = _load(args)
    if args.dry_run:
        taskset = runner.build_taskset(cfg)
        model = runner.build_model(cfg, taskset, cfg.trainer.seeds[0])
        budget = runner.parameter_budget(
            cfg.strategy.name, cfg.backbone.model_dim, cfg.strategy.rank,
            model.inventory.num_skills, len(taskset.train_tasks),
            cfg.strategy.num_heads, len(model.inventory.sites))
        print(json.dumps({"strategy": cfg.strategy.name,
                          "num_sites": len(model.inventory.sites),
                          "budget": budget}, indent=1))
        return 0
    ckpt, _, taskset, log = runner.run_pretrain(cfg)
    last = log.evals[-1] if log.evals else None
    print(f"pretrained {cfg.strategy.name} on "
          f"{len(taskset.train_tasks)} tasks -> {ckpt}")
    if last is not None:
        print(f"final validation perplexity {last['perplexity']:.4f} "
              f"at step {last['step']}")
    return 0


def cmd_adapt_eval(args) -> int:
    cfg = _load(args)
    rows = runner.run_adapt_eval(cfg, args.checkpoint)
    if not rows:
        print("warning: no test tasks; nothing to adapt", file=sys.stderr)
        return 0
    aggs = runner.aggregate(rows)
    for strat, agg in aggs.items():
        print(f"{strat}: exact match "
              f"{agg['sequence_exact_match_mean']:.4f} "
              f"+/- {agg['sequence_exact_match_std']:.4f} "
              f"({agg['num_rows']} runs)")
    print(f"results written to {cfg.resolved_output_dir()}")
    return 0


def cmd_count(args) -> int:
    budget = runner.parameter_budget(args.method, args.d, args.r,
                                     args.skills, args.tasks, args.heads,
                                     args.sites)
    print(json.dumps({"method": args.method, "budget": budget}, indent=1))
    return 0


def cmd_align(args) -> int:
    cfg = _load(args)
    report = runner.run_align(cfg, args.checkpoint)
    print(f"mean off-diagonal cosine alignment: "
          f"{report.mean_offdiag:.6f}")
    print(f"matrix written to {cfg.resolved_output_dir()}/alignment.csv")
    return 0


def cmd_suite(args) -> int:
    cfg = _load(args)
    rows = runner.run_suite(cfg)
    if not rows:
        print("warning: no test tasks; nothing to compare", file=sys.stderr)
        return 0
    aggs = runner.aggregate(rows)
    order = sorted(aggs, key=lambda s: -aggs[s]["sequence_exact_match_mean"])
    width = max(len(s) for s in order)
    print(f"{'strategy':<{width}}  exact_match  token_acc  perplexity")
    for strat in order:
        a = aggs[strat]
        print(f"{strat:<{width}}  "
              f"{a['sequence_exact_match_mean']:>11.4f}  "
              f"{a['token_accuracy_mean']:>9.4f}  "
              f"{a['perplexity_mean']:>10.4f}")
    print(f"results written to {cfg.resolved_output_dir()}")
    return 0


COMMANDS = {"pretrain": cmd_pretrain, "adapt-eval": cmd_adapt_eval,
            "count": cmd_count, "align": cmd_align, "suite": cmd_suite}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except ConfigurationError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except TrainingError as exc:
        print(f"training failure: {exc}", file=sys.stderr)
        return EXIT_TRAINING
    except SkillRouteError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
