"""Entrypoint for the command line."""
import argparse
import json
import logging
import os
import re
import sys
from pathlib import Path
from typing import Any, Optional, Sequence

from common.bundle import Bundle, prepare_bundle
from common.errors import DataError, GsnpError, UsageError
from common.models import SplitSpec, SynthSpec, TrainConfig
from common.synth import synth_bundle
from engine.evaluator import evaluate_shots, evaluate_split
from engine.explain import explain_task, export_explanation
from engine.model import GSNPModel
from engine.trainer import Trainer, tau_sweep

from .display import Board, report_lines

logger = logging.getLogger("gsnp.cli")

# Default config file when --config is not given.
CONFIG_ENV = "GSNP_CONFIG"

# Settings that may differ between training and evaluation of a checkpoint.
EVAL_OVERRIDES = ("n_candidates", "eval_samples", "explain_threshold")


class ArgumentParser(argparse.ArgumentParser):
    """Parser that reports bad flags as usage errors instead of exiting."""

    def error(self, message: str):
        """Raise instead of printing usage and exiting with status 2."""
        raise UsageError(message)


def _flag(name: str) -> str:
    return "--" + name.lower().replace("_", "-")


def add_config_flags(parser: argparse.ArgumentParser):
    """One override flag per training setting."""
    group = parser.add_argument_group("config overrides")
    for name, model_field in TrainConfig.__fields__.items():
        if model_field.outer_type_ is bool:
            group.add_argument(
                _flag(name),
                dest=name,
                action=argparse.BooleanOptionalAction,
                default=None,
            )
        else:
            group.add_argument(
                _flag(name), dest=name, type=model_field.outer_type_
            )


def config_overrides(args: argparse.Namespace) -> dict[str, Any]:
    """Flag values that override the config file."""
    return {
        name: getattr(args, name)
        for name in TrainConfig.__fields__
        if getattr(args, name, None) is not None
    }


def load_config(args: argparse.Namespace) -> TrainConfig:
    """The config file (flag or environment) with flag overrides on top."""
    path = args.config or os.environ.get(CONFIG_ENV) or None
    return TrainConfig.load(path, config_overrides(args))


def build_parser() -> ArgumentParser:
    """Define every verb and its flags."""
    parser = ArgumentParser(prog="gsnp", description=__doc__)
    parser.add_argument("-v", "--verbose", action="count", default=0)
    parser.add_argument("-q", "--quiet", action="store_true")
    verbs = parser.add_subparsers(dest="verb", required=True)

    prepare = verbs.add_parser("prepare", help="build a dataset bundle")
    prepare.add_argument("sources", nargs="+", type=Path)
    prepare.add_argument("--out", type=Path, required=True)
    prepare.add_argument("--split", type=Path, help="split spec JSON")
    prepare.add_argument("--valid", action="append")
    prepare.add_argument("--test", action="append")
    prepare.add_argument("--shots", type=int)
    prepare.add_argument("--query-fraction", type=float)
    prepare.add_argument("--n-candidates", type=int)
    prepare.add_argument(
        "--transductive", action=argparse.BooleanOptionalAction, default=None
    )
    prepare.add_argument("--seed", type=int)

    synth = verbs.add_parser("synth", help="generate a planted-rule bundle")
    synth.add_argument("--out", type=Path, required=True)
    synth.add_argument("--spec", type=Path, help="synth spec JSON")
    synth.add_argument("--entities", dest="n_entities", type=int)
    synth.add_argument("--pairs", dest="n_pairs", type=int)
    synth.add_argument("--distractors", dest="n_distractors", type=int)
    synth.add_argument("--shots", type=int)
    synth.add_argument("--candidates", dest="n_candidates", type=int)
    synth.add_argument("--seed", type=int)

    train = verbs.add_parser("train", help="train a model on a bundle")
    train.add_argument("--bundle", type=Path, required=True)
    train.add_argument("--out", type=Path, required=True)
    train.add_argument("--config", type=Path)
    train.add_argument("--tau-sweep", type=float, nargs="+")
    train.add_argument("--board", action="store_true")
    add_config_flags(train)

    evaluate = verbs.add_parser("eval", help="rank the queries of a split")
    evaluate.add_argument("--checkpoint", type=Path, required=True)
    evaluate.add_argument("--bundle", type=Path, required=True)
    evaluate.add_argument(
        "--split", choices=("valid", "test"), default="test"
    )
    evaluate.add_argument("--k", dest="shots", type=int, action="append")
    evaluate.add_argument("--n-candidates", type=int)
    evaluate.add_argument("--eval-samples", type=int)
    evaluate.add_argument("--out", type=Path, help="report JSON")
    evaluate.add_argument("--table", action="store_true")

    explain = verbs.add_parser("explain", help="export explanatory subgraphs")
    explain.add_argument("--checkpoint", type=Path, required=True)
    explain.add_argument("--bundle", type=Path, required=True)
    explain.add_argument("--split", choices=("valid", "test"), default="test")
    explain.add_argument("--task", required=True, help="index or relation")
    explain.add_argument("--query", type=int, help="query index")
    explain.add_argument("--threshold", dest="explain_threshold", type=float)
    explain.add_argument("--top-k", type=int)
    explain.add_argument("--format", choices=("dot", "json"), default="dot")
    explain.add_argument("--out", type=Path, required=True)
    return parser


def cmd_prepare(args: argparse.Namespace) -> int:
    """Split raw triple files into a bundle."""
    overrides = {
        key: getattr(args, key)
        for key in (
            "valid",
            "test",
            "shots",
            "query_fraction",
            "n_candidates",
            "transductive",
            "seed",
        )
    }
    spec = SplitSpec.load(args.split, overrides)
    print(prepare_bundle(args.sources, spec, args.out), end="")
    return 0


def cmd_synth(args: argparse.Namespace) -> int:
    """Generate a planted-rule bundle."""
    overrides = {
        key: getattr(args, key)
        for key in (
            "n_entities",
            "n_pairs",
            "n_distractors",
            "shots",
            "n_candidates",
            "seed",
        )
    }
    spec = SynthSpec.load(args.spec, overrides)
    print(json.dumps(synth_bundle(spec, args.out), sort_keys=True))
    return 0


def cmd_train(args: argparse.Namespace) -> int:
    """Train, validate and write a checkpoint plus a metrics log."""
    config = load_config(args)
    bundle = Bundle.load(args.bundle)
    if args.tau_sweep:
        results = tau_sweep(bundle, config, args.tau_sweep, args.out)
        for tau, mrr in results.items():
            print(f"tau={tau}\tval_mrr={'-' if mrr is None else f'{mrr:.6f}'}")
        return 0
    board = Board(f"GS-NP {args.bundle.name}") if args.board else None
    trainer = Trainer(
        bundle,
        config,
        args.out,
        on_round=None if board is None else board.update,
    )
    result = trainer.run()
    print(
        f"episodes={result.episodes}\tbest_val_mrr="
        f"{'-' if result.best_mrr is None else f'{result.best_mrr:.6f}'}\t"
        f"checkpoint={result.checkpoint}"
    )
    return 0


def _load_model(args: argparse.Namespace) -> GSNPModel:
    overrides = {
        key: getattr(args, key)
        for key in EVAL_OVERRIDES
        if getattr(args, key, None) is not None
    }
    return GSNPModel.load(args.checkpoint, **overrides)


def cmd_eval(args: argparse.Namespace) -> int:
    """Rank a split and print its metrics."""
    model = _load_model(args)
    bundle = Bundle.load(args.bundle)
    tasks = bundle.split(args.split)
    if not tasks:
        raise DataError(f"{args.bundle} has no {args.split} tasks")
    kg = bundle.test_graph
    if args.shots:
        reports = evaluate_shots(model, kg, tasks, args.shots)
    else:
        reports = {None: evaluate_split(model, kg, tasks)}
    records = {}
    for shots, report in reports.items():
        label = "all" if shots is None else f"K={shots}"
        lines = report_lines(report, label)
        if args.table:
            lines = [report.table().rstrip("\n")]
        print("\n".join(lines))
        records[label] = report.dict()
    if args.out is not None:
        with open(args.out, "w", encoding="utf-8", newline="\n") as f:
            json.dump(records, f, indent=1, sort_keys=True)
            f.write("\n")
    return 0


def _safe(name: str) -> str:
    return re.sub(r"[^A-Za-z0-9_.-]+", "_", name)


def cmd_explain(args: argparse.Namespace) -> int:
    """Export the explanatory subgraphs of a task's queries."""
    model = _load_model(args)
    bundle = Bundle.load(args.bundle)
    tasks = bundle.split(args.split)
    if args.task.isdigit() and int(args.task) < len(tasks):
        task = tasks[int(args.task)]
    else:
        matches = [t for t in tasks if t.relation == args.task]
        if not matches:
            raise DataError(f"no {args.split} task {args.task!r}")
        task = matches[0]
    if args.query is not None:
        if not 0 <= args.query < len(task.queries):
            raise UsageError(f"query index {args.query} out of range")
        task.queries = [task.queries[args.query]]
    explanations = explain_task(
        model,
        bundle.test_graph,
        task,
        model.config.explain_threshold,
        args.top_k,
    )
    args.out.mkdir(parents=True, exist_ok=True)
    first = args.query or 0
    for i, exp in enumerate(explanations, start=first):
        path = args.out / f"{_safe(task.relation)}-{i}.{args.format}"
        export_explanation(exp, args.format, path)
        print(f"{path}\tkept={len(exp.kept)}\tdropped={len(exp.dropped)}")
    return 0


COMMANDS = {
    "prepare": cmd_prepare,
    "synth": cmd_synth,
    "train": cmd_train,
    "eval": cmd_eval,
    "explain": cmd_explain,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Run one verb and return its exit code."""
    try:
        args = build_parser().parse_args(argv)
    except UsageError as e:
        print(f"gsnp: {e}", file=sys.stderr)
        return e.exit_code
    level = logging.INFO - 10 * args.verbose
    if args.quiet:
        level = logging.WARNING
    logging.basicConfig(level=level)
    try:
        return COMMANDS[args.verb](args)
    except GsnpError as e:
        logger.error(str(e))
        return e.exit_code


if __name__ == "__main__":
    sys.exit(main())
