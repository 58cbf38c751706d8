"""Subcommand runners: cache preparation, training, evaluation and the verification harnesses."""
from __future__ import annotations

import json
import os
import time
from dataclasses import dataclass, fields
from typing import Callable, Dict, List, Optional

import numpy as np
from tqdm import trange

from .autodiff import cross_entropy_with_logits, no_tape
from .cachefile import CACHE_MAGIC, read_cache
from .checkpoint import CHECKPOINT_MAGIC, load_checkpoint
from .config import ExperimentConfig, load_experiment
from .dataset import BuildSummary, build_cache
from .errors import ContractError, ValidationError
from .geometry import (
    NeighborGraph,
    PointCloud,
    knn_graph_bruteforce,
    knn_graph_indexed,
    normalize_unit_sphere,
)
from .gradcheck import block_errors, parameter_errors
from .model import MRFGATConfig, mrfgat_forward_batch, param_count, param_init
from .progress import Stage, Status, emit_progress
from .training import LAST_CHECKPOINT, Metrics, evaluate, train
from .utils import _print_block_errors, _print_class_accuracy, _print_class_counts

GRADCHECK_THRESHOLD = 1e-4
GRADCHECK_CLOUDS = 2
GRADCHECK_PRIMING_PASSES = 3


def _stage_banner(current: int, total: int, label: str) -> None:
    width = 60
    header = f"  Stage {current}/{total} ▸ {label}  "
    pad = max(0, width - len(header))
    print(f"\n{'━' * width}")
    print(f"{header}{' ' * pad}")
    print(f"{'━' * width}")


@dataclass
class PrepareConfig:
    raw: str
    out: str
    points: int = 1024
    seed: int = 0
    fraction: Optional[float] = None
    workers: int = 1


def cmd_prepare(config: PrepareConfig) -> int:
    """Sample a ModelNet tree into a cache; exit 1 when any mesh was skipped."""
    _stage_banner(1, 2, "Sampling Meshes")
    _, summary = build_cache(
        config.raw,
        config.out,
        n_points=config.points,
        seed=config.seed,
        fraction=config.fraction,
        workers=config.workers,
    )

    _stage_banner(2, 2, "Summary")
    _print_class_counts("Samples per class", summary.class_names, summary.counts)
    print(summary.summary_line())
    if summary.unchanged:
        print(f"cache unchanged: {config.out}")
    else:
        print(f"cache written: {config.out}")
    return _report_skipped(summary)


def _report_skipped(summary: BuildSummary) -> int:
    if not summary.skipped:
        return 0
    print(f"\nSkipped {len(summary.skipped)} files:")
    for path, reason in summary.skipped:
        print(f"  {path}: {reason}")
    return 1


def cmd_train(
    cache_path: str,
    experiment: ExperimentConfig,
    resume_path: Optional[str] = None,
) -> int:
    """Train on a cache, writing checkpoints and the JSON-lines epoch log."""
    _stage_banner(1, 3, "Loading Cache")
    cache = read_cache(cache_path)
    print(f"{cache.num_samples} clouds of {cache.n_points} points, {cache.num_classes} classes")
    resume = load_checkpoint(resume_path) if resume_path else None
    if resume is not None:
        print(f"Resuming from epoch {resume.epoch}: {resume_path}")

    _stage_banner(2, 3, "Training")
    emit_progress(Stage.TRAINING, Status.RUNNING, "Training", total=experiment.train.epochs)
    checkpoint, logs = train(cache, experiment.model, experiment.train, resume=resume)
    for entry in logs:
        test = ""
        if entry["test_OA"] is not None:
            test = f" test_OA={entry['test_OA']:.4f} test_MA={entry['test_MA']:.4f}"
        print(
            f"epoch {entry['epoch']:>4}  loss={entry['loss']:.4f} "
            f"train_acc={entry['train_acc']:.4f}{test} lr={entry['lr']:.2e}"
        )
    emit_progress(Stage.TRAINING, Status.COMPLETE, "Training completed", current=checkpoint.epoch)

    _stage_banner(3, 3, "Summary")
    best = "n/a" if checkpoint.best_oa is None else f"{checkpoint.best_oa:.4f}"
    print(f"Finished at epoch {checkpoint.epoch}; best test OA {best}")
    if experiment.train.checkpoint_dir:
        print(f"Checkpoints: {os.path.join(experiment.train.checkpoint_dir, LAST_CHECKPOINT)}")
    return 0


def _require_model(config: MRFGATConfig, expected: MRFGATConfig) -> None:
    differing = [
        f"{field.name}={getattr(config, field.name)!r} (expected {getattr(expected, field.name)!r})"
        for field in fields(MRFGATConfig)
        if getattr(config, field.name) != getattr(expected, field.name)
    ]
    if differing:
        raise ContractError("checkpoint model differs from the experiment: " + ", ".join(differing))


def cmd_eval(
    cache_path: str,
    checkpoint_path: str,
    split: str = "test",
    batch_size: int = 16,
    workers: int = 1,
    as_json: bool = False,
    expected: Optional[MRFGATConfig] = None,
) -> Metrics:
    """
    Evaluate a checkpoint; prints OA/MA and a per-class table, or JSON.

    With ``expected``, a checkpoint trained with any other model configuration
    is rejected before evaluation.
    """
    cache = read_cache(cache_path)
    checkpoint = load_checkpoint(checkpoint_path)
    if expected is not None:
        _require_model(checkpoint.config, expected)
    emit_progress(Stage.EVALUATION, Status.RUNNING, f"Evaluating {split} split")
    metrics = evaluate(checkpoint, cache, split, batch_size=batch_size, workers=workers)
    emit_progress(
        Stage.EVALUATION,
        Status.COMPLETE,
        "Evaluation completed",
        OA=metrics.overall_accuracy,
        MA=metrics.mean_class_accuracy,
    )
    if as_json:
        print(json.dumps(metrics.to_dict()))
        return metrics
    print(f"OA={metrics.overall_accuracy:.4f} MA={metrics.mean_class_accuracy:.4f}")
    _print_class_accuracy(
        "Per-class accuracy",
        cache.class_names,
        metrics.per_class,
        metrics.confusion.sum(axis=1).tolist(),
    )
    return metrics


def _memoized_knn(backend: Callable[[PointCloud, int], NeighborGraph]) -> Callable[[PointCloud, int], NeighborGraph]:
    graphs: Dict[tuple, NeighborGraph] = {}

    def knn(pc: PointCloud, k: int) -> NeighborGraph:
        key = (pc.points.tobytes(), k)
        if key not in graphs:
            graphs[key] = backend(pc, k)
        return graphs[key]

    return knn


def gradcheck_report(
    config: MRFGATConfig,
    size: int,
    seed: int,
    eps: float = 1e-5,
) -> Dict[str, float]:
    """
    Worst relative gradient error per parameter block of the cross-entropy
    loss on random clouds.

    Batch-norm statistics are primed with a few train-mode passes and the
    check runs in infer mode.
    """
    rng = np.random.default_rng(seed)
    params = param_init(config, rng)
    points = np.stack(
        [normalize_unit_sphere(PointCloud(rng.normal(size=(size, 3)))).points for _ in range(GRADCHECK_CLOUDS)]
    )
    labels = rng.integers(0, config.num_classes, size=GRADCHECK_CLOUDS)
    knn = _memoized_knn(knn_graph_indexed)
    with no_tape():
        for _ in range(GRADCHECK_PRIMING_PASSES):
            mrfgat_forward_batch(points, params, config, "train", rng=rng, knn=knn)

    def loss():
        return cross_entropy_with_logits(mrfgat_forward_batch(points, params, config, "infer", knn=knn), labels)

    return block_errors(parameter_errors(loss, params.parameters(), eps))


def cmd_gradcheck(
    config: MRFGATConfig,
    size: int = 16,
    seed: int = 0,
    eps: float = 1e-5,
    threshold: float = GRADCHECK_THRESHOLD,
) -> int:
    """Finite-difference check of every parameter block; exit 0 iff all pass."""
    _stage_banner(1, 1, "Gradient Check")
    emit_progress(
        Stage.GRADCHECK, Status.RUNNING, "Checking gradients", detail=f"{param_count(config)} parameters"
    )
    started = time.perf_counter()
    blocks = gradcheck_report(config, size, seed, eps)
    elapsed = time.perf_counter() - started
    _print_block_errors(blocks, threshold)
    worst = max(blocks.values())
    failing = [name for name, error in blocks.items() if not error < threshold]
    if failing:
        print(f"FAIL: max relative error {worst:.3e} >= {threshold:g} in {', '.join(failing)}")
        emit_progress(Stage.GRADCHECK, Status.ERROR, "Gradient check failed", detail=", ".join(failing))
        return 1
    print(f"PASS: max relative error {worst:.3e} < {threshold:g} ({elapsed:.1f}s)")
    emit_progress(Stage.GRADCHECK, Status.COMPLETE, "Gradient check passed", max_error=worst)
    return 0


def cmd_bench_knn(n: int = 1024, k: int = 32, repeat: int = 10, seed: int = 0) -> Dict[str, List[float]]:
    """Time both kNN backends on random clouds; any disagreement is a hard failure."""
    if n < k:
        raise ValidationError(f"n={n} must be at least k={k}")
    if repeat < 1:
        raise ValidationError(f"repeat must be at least 1, got {repeat}")
    backends = {"bruteforce": knn_graph_bruteforce, "indexed": knn_graph_indexed}
    timings: Dict[str, List[float]] = {name: [] for name in backends}
    for trial in trange(repeat, desc="  Benchmarking kNN", unit="cloud", leave=False):
        pc = PointCloud(np.random.default_rng([seed, trial]).uniform(-1.0, 1.0, size=(n, 3)))
        graphs = {}
        for name, backend in backends.items():
            started = time.perf_counter()
            graphs[name] = backend(pc, k)
            timings[name].append(time.perf_counter() - started)
        if not np.array_equal(graphs["bruteforce"].indices, graphs["indexed"].indices):
            raise ContractError(f"kNN backends disagree on cloud {trial} (n={n}, k={k})")
    print(f"{'backend':<12}  {'mean ms':>9}  {'p95 ms':>9}")
    for name, values in timings.items():
        print(f"{name:<12}  {1e3 * np.mean(values):>9.3f}  {1e3 * np.percentile(values, 95):>9.3f}")
    print(f"backends agree on all {repeat} clouds (n={n}, k={k})")
    emit_progress(Stage.BENCH_KNN, Status.COMPLETE, "kNN benchmark finished", current=repeat, total=repeat)
    return timings


def cmd_inspect(path: Optional[str], experiment_name: Optional[str] = None) -> int:
    """Print cache or checkpoint headers, and parameter counts for an experiment."""
    if path is None and experiment_name is None:
        raise ValidationError("inspect needs a file path or --config")
    if path is not None:
        with open(path, "rb") as f:
            magic = f.read(4)
        if magic == CACHE_MAGIC:
            cache = read_cache(path)
            print(f"cache: {path}")
            print(f"points per cloud: {cache.n_points}")
            print(f"samples: {cache.num_samples}")
            print(f"classes: {cache.num_classes}")
            _print_class_counts(
                "Samples per class",
                cache.class_names,
                {split: cache.class_counts(split) for split in ("train", "test")},
            )
        elif magic == CHECKPOINT_MAGIC:
            checkpoint = load_checkpoint(path)
            print(f"checkpoint: {path}")
            print(f"format version: {checkpoint.version}")
            print(f"epoch: {checkpoint.epoch}")
            print(f"best test OA: {checkpoint.best_oa}")
            print(f"adam step: {checkpoint.adam.step}, lr {checkpoint.adam.learning_rate:g}")
            print(f"parameters: {checkpoint.params.num_parameters()}")
            print(f"config: {checkpoint.config}")
        else:
            raise ValidationError(f"{path} is neither a sample cache nor a checkpoint (magic {magic!r})")
    if experiment_name is not None:
        config = load_experiment(experiment_name).model
        print(f"\nexperiment: {experiment_name}")
        print(f"param_count: {param_count(config)}")
        for stage, width in config.width_schedule().items():
            print(f"  {stage:<10} {width}")
    return 0
