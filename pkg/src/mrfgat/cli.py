"""Command-line interface for MRFGAT."""
from __future__ import annotations

import argparse
import os
import sys
from typing import Optional, Sequence

from dotenv import load_dotenv

from .config import ExperimentConfig, load_experiment, with_overrides
from .errors import MRFGATError
from .pipeline import (
    PrepareConfig,
    cmd_bench_knn,
    cmd_eval,
    cmd_gradcheck,
    cmd_inspect,
    cmd_prepare,
    cmd_train,
)

EXIT_OK = 0
EXIT_FAILURE = 1


def build_parser() -> argparse.ArgumentParser:
    """The ``mrfgat`` parser; defaults for paths come from the environment."""
    seeded = argparse.ArgumentParser(add_help=False)
    seeded.add_argument("--seed", type=int, default=None, help="Seed for every random draw (default: experiment seed).")
    configured = argparse.ArgumentParser(add_help=False)
    configured.add_argument(
        "--config",
        default=None,
        help="Experiment file: a packaged name such as modelnet40-default, or a path.",
    )
    single_worker = argparse.ArgumentParser(add_help=False)
    single_worker.add_argument(
        "--deterministic",
        action="store_true",
        help="Force a single worker everywhere so results reproduce bit for bit.",
    )
    # Each subcommand takes only the shared flags it acts on.
    run = [seeded, configured, single_worker]

    parser = argparse.ArgumentParser(
        prog="mrfgat",
        description="Multi-scale graph-attention point-cloud classification on ModelNet.",
    )
    commands = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    prepare = commands.add_parser("prepare", parents=run, help="Sample OFF meshes into a point cache.")
    prepare.add_argument("--raw", default=os.environ.get("MRFGAT_RAW"), help="ModelNet root (class/split/*.off).")
    prepare.add_argument("--out", default=os.environ.get("MRFGAT_CACHE"), help="Cache file to write.")
    prepare.add_argument("--points", type=int, default=None, help="Points sampled per mesh (default 1024).")
    prepare.add_argument(
        "--fraction",
        type=float,
        default=None,
        help="Keep a seeded stratified fraction of every class and split.",
    )
    prepare.add_argument("--workers", type=int, default=1, help="Meshes sampled in parallel.")

    train = commands.add_parser("train", parents=run, help="Train a classifier on a cache.")
    train.add_argument("--cache", default=os.environ.get("MRFGAT_CACHE"), help="Sample cache to train on.")
    train.add_argument("--checkpoint-dir", default="checkpoints", help="Directory for best/last checkpoints.")
    train.add_argument("--resume", default=None, help="Checkpoint to continue training from.")
    train.add_argument("--log", default=None, help="JSON-lines epoch log (default: <checkpoint-dir>/train.jsonl).")
    train.add_argument("--epochs", type=int, default=None, help="Total epochs to train.")
    train.add_argument("--batch-size", type=int, default=None, help="Mini-batch size.")
    train.add_argument("--learning-rate", type=float, default=None, help="Initial Adam learning rate.")
    train.add_argument("--workers", type=int, default=None, help="Evaluation workers.")

    evaluate = commands.add_parser("eval", parents=[single_worker], help="Evaluate a checkpoint.")
    evaluate.add_argument("--config", default=None, help="Experiment whose model the checkpoint must match.")
    evaluate.add_argument("--cache", default=os.environ.get("MRFGAT_CACHE"), help="Sample cache to evaluate on.")
    evaluate.add_argument("--checkpoint", required=True, help="Checkpoint to evaluate.")
    evaluate.add_argument("--split", choices=["train", "test"], default="test", help="Split to evaluate.")
    evaluate.add_argument("--batch-size", type=int, default=16, help="Clouds per forward pass.")
    evaluate.add_argument("--workers", type=int, default=1, help="Batches evaluated in parallel.")
    evaluate.add_argument("--json", action="store_true", help="Print the full metrics as JSON.")

    gradcheck = commands.add_parser("gradcheck", parents=[seeded, configured], help="Finite-difference gradient check.")
    gradcheck.add_argument("--size", type=int, default=None, help="Points per random cloud (default: experiment).")
    gradcheck.add_argument("--eps", type=float, default=1e-5, help="Central-difference step.")

    bench = commands.add_parser("bench-knn", parents=[seeded], help="Time and cross-check the kNN backends.")
    bench.add_argument("--n", type=int, default=1024, help="Points per cloud.")
    bench.add_argument("--k", type=int, default=32, help="Neighbors per point.")
    bench.add_argument("--repeat", type=int, default=10, help="Random clouds to time.")

    inspect = commands.add_parser("inspect", parents=[configured], help="Show cache or checkpoint headers.")
    inspect.add_argument("path", nargs="?", default=None, help="Cache or checkpoint file.")
    return parser


def parse_args(argv: Optional[Sequence[str]] = None) -> argparse.Namespace:
    """Parse MRFGAT command-line arguments."""
    return build_parser().parse_args(argv)


def config_from_args(args: argparse.Namespace) -> ExperimentConfig:
    """The experiment named by ``--config`` with command-line overrides applied."""
    experiment = load_experiment(args.config)
    workers = getattr(args, "workers", None)
    if args.deterministic:
        workers = 1
    log_path = getattr(args, "log", None)
    checkpoint_dir = getattr(args, "checkpoint_dir", None)
    if checkpoint_dir and not log_path:
        log_path = os.path.join(checkpoint_dir, "train.jsonl")
    experiment.train = with_overrides(
        experiment.train,
        seed=args.seed,
        epochs=getattr(args, "epochs", None),
        batch_size=getattr(args, "batch_size", None),
        learning_rate=getattr(args, "learning_rate", None),
        workers=workers,
        checkpoint_dir=checkpoint_dir,
        log_path=log_path,
    )
    if getattr(args, "points", None) is not None:
        experiment.points = args.points
    if getattr(args, "fraction", None) is not None:
        experiment.fraction = args.fraction
    return experiment


def _dispatch(args: argparse.Namespace, parser: argparse.ArgumentParser) -> int:
    if args.command == "prepare":
        if not args.raw or not args.out:
            parser.error("prepare needs --raw and --out (or MRFGAT_RAW and MRFGAT_CACHE)")
        if not os.path.isdir(args.raw):
            parser.error(f"dataset directory not found: {args.raw}")
        experiment = config_from_args(args)
        return cmd_prepare(
            PrepareConfig(
                raw=args.raw,
                out=args.out,
                points=experiment.points,
                seed=experiment.train.seed,
                fraction=experiment.fraction,
                workers=1 if args.deterministic else args.workers,
            )
        )
    if args.command == "train":
        if not args.cache:
            parser.error("train needs --cache (or MRFGAT_CACHE)")
        return cmd_train(args.cache, config_from_args(args), resume_path=args.resume)
    if args.command == "eval":
        if not args.cache:
            parser.error("eval needs --cache (or MRFGAT_CACHE)")
        cmd_eval(
            args.cache,
            args.checkpoint,
            split=args.split,
            batch_size=args.batch_size,
            workers=1 if args.deterministic else args.workers,
            as_json=args.json,
            expected=load_experiment(args.config).model if args.config else None,
        )
        return EXIT_OK
    if args.command == "gradcheck":
        experiment = load_experiment(args.config or "reduced")
        size = args.size if args.size is not None else experiment.points
        return cmd_gradcheck(experiment.model, size=size, seed=args.seed or 0, eps=args.eps)
    if args.command == "bench-knn":
        cmd_bench_knn(n=args.n, k=args.k, repeat=args.repeat, seed=args.seed or 0)
        return EXIT_OK
    return cmd_inspect(args.path, args.config)


def main(argv: Optional[Sequence[str]] = None) -> int:
    """CLI entrypoint: 0 on success, 1 on a runtime failure, 2 on a usage error."""
    load_dotenv()
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return _dispatch(args, parser)
    except (MRFGATError, OSError) as error:
        print(f"Error: {error}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
