"""Optimisation loop, evaluation metrics and per-epoch experiment logging."""
from __future__ import annotations

import json
import logging
import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
from tqdm import tqdm

from .autodiff import Tape, backward, cross_entropy_with_logits, no_tape
from .cachefile import CacheFile
from .checkpoint import Checkpoint, save_checkpoint
from .dataset import AugmentConfig, batch_iter, num_batches
from .errors import ContractError, NonFiniteLossError, ValidationError
from .geometry import KNN_BACKENDS
from .model import MRFGATConfig, NetworkParams, mrfgat_forward_batch, param_init
from .optim import AdamState, adam_step, step_decay_lr
from .progress import Stage, Status, emit_progress

logger = logging.getLogger(__name__)

BEST_CHECKPOINT = "best.ckpt"
LAST_CHECKPOINT = "last.ckpt"


@dataclass
class TrainConfig:
    epochs: int = 250
    batch_size: int = 16
    learning_rate: float = 1e-3
    lr_decay: float = 0.7
    lr_decay_every: int = 20
    seed: int = 0
    eval_every: int = 1
    checkpoint_dir: Optional[str] = None
    log_path: Optional[str] = None
    augment: Optional[AugmentConfig] = field(default_factory=AugmentConfig)
    workers: int = 1
    knn: str = "indexed"

    def __post_init__(self) -> None:
        if self.epochs < 0:
            raise ValidationError(f"epoch count must be non-negative, got {self.epochs}")
        if self.batch_size < 1:
            raise ValidationError(f"batch size must be at least 1, got {self.batch_size}")
        if not self.learning_rate > 0:
            raise ValidationError(f"learning rate must be positive, got {self.learning_rate}")
        if not 0.0 < self.lr_decay <= 1.0:
            raise ValidationError(f"learning-rate decay must lie in (0, 1], got {self.lr_decay}")
        if self.seed < 0:
            raise ValidationError(f"seed must be non-negative, got {self.seed}")
        if self.workers < 1:
            raise ValidationError(f"worker count must be at least 1, got {self.workers}")
        if self.knn not in KNN_BACKENDS:
            raise ValidationError(f"kNN backend must be one of {sorted(KNN_BACKENDS)}, got {self.knn!r}")


@dataclass
class Metrics:
    """
    Classification quality over one split.

    ``confusion[t, p]`` counts samples of true class ``t`` predicted as ``p``.
    Classes without support have ``None`` accuracy and are left out of MA.
    """

    overall_accuracy: float
    mean_class_accuracy: float
    per_class: List[Optional[float]]
    confusion: np.ndarray
    unsupported_classes: List[int] = field(default_factory=list)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "OA": self.overall_accuracy,
            "MA": self.mean_class_accuracy,
            "per_class": self.per_class,
            "confusion": self.confusion.tolist(),
            "unsupported_classes": self.unsupported_classes,
        }


def metrics_from_confusion(confusion: np.ndarray) -> Metrics:
    confusion = np.asarray(confusion, dtype=np.int64)
    if confusion.ndim != 2 or confusion.shape[0] != confusion.shape[1]:
        raise ValidationError(f"confusion matrix must be square, got shape {confusion.shape}")
    total = int(confusion.sum())
    if total == 0:
        raise ValidationError("confusion matrix is empty")
    support = confusion.sum(axis=1)
    correct = np.diag(confusion)
    per_class: List[Optional[float]] = [
        int(hits) / int(count) if count else None for hits, count in zip(correct, support)
    ]
    supported = [accuracy for accuracy in per_class if accuracy is not None]
    unsupported = [index for index, accuracy in enumerate(per_class) if accuracy is None]
    if unsupported:
        logger.warning("Classes without support, excluded from MA: %s", unsupported)
    return Metrics(
        overall_accuracy=int(correct.sum()) / total,
        mean_class_accuracy=sum(supported) / len(supported),
        per_class=per_class,
        confusion=confusion,
        unsupported_classes=unsupported,
    )


def metrics_from_predictions(
    labels: Sequence[int],
    predictions: Sequence[int],
    num_classes: int,
) -> Metrics:
    labels = np.asarray(labels, dtype=np.int64)
    predictions = np.asarray(predictions, dtype=np.int64)
    if labels.shape != predictions.shape:
        raise ValidationError(f"{labels.shape} labels but {predictions.shape} predictions")
    for name, values in (("labels", labels), ("predictions", predictions)):
        if values.size and (values.min() < 0 or values.max() >= num_classes):
            raise ValidationError(f"{name} must lie in [0, {num_classes})")
    confusion = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(confusion, (labels, predictions), 1)
    return metrics_from_confusion(confusion)


def predict(
    params: NetworkParams,
    config: MRFGATConfig,
    cache: CacheFile,
    split: str,
    batch_size: int = 16,
    workers: int = 1,
    knn: str = "indexed",
) -> Tuple[np.ndarray, np.ndarray]:
    """Infer-mode ``(labels, predictions)`` over one split in cache order."""
    batches = list(batch_iter(cache, split, batch_size))
    backend = KNN_BACKENDS[knn]

    def classify(batch: Tuple[np.ndarray, np.ndarray]) -> np.ndarray:
        with no_tape():
            logits = mrfgat_forward_batch(batch[0], params, config, "infer", knn=backend)
        return np.argmax(logits.data, axis=1)

    with ThreadPoolExecutor(max_workers=workers) as pool:
        predictions = list(
            tqdm(pool.map(classify, batches), total=len(batches), desc=f"Evaluating {split}", leave=False)
        )
    labels = np.concatenate([batch[1] for batch in batches])
    return labels, np.concatenate(predictions)


def evaluate(
    checkpoint: Checkpoint,
    cache: CacheFile,
    split: str = "test",
    batch_size: int = 16,
    workers: int = 1,
    knn: str = "indexed",
) -> Metrics:
    """Infer-mode metrics of a checkpoint over a cache split; parameters are not touched."""
    if checkpoint.config.num_classes != cache.num_classes:
        raise ValidationError(
            f"checkpoint predicts {checkpoint.config.num_classes} classes, "
            f"cache holds {cache.num_classes}"
        )
    labels, predictions = predict(
        checkpoint.params, checkpoint.config, cache, split, batch_size, workers, knn
    )
    return metrics_from_predictions(labels, predictions, cache.num_classes)


def _append_log(path: str, entry: Dict[str, Any]) -> None:
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    with open(path, "a", encoding="utf-8") as f:
        f.write(json.dumps(entry) + "\n")


def train(
    cache: CacheFile,
    model_config: MRFGATConfig,
    train_config: TrainConfig,
    resume: Optional[Checkpoint] = None,
) -> Tuple[Checkpoint, List[Dict[str, Any]]]:
    """
    Train with Adam on the cache's train split.

    Parameters and the dropout generator both come from ``seed``; shuffling
    and augmentation are keyed by ``(seed, epoch)``. Passing ``resume``
    continues a saved run from its epoch counter with its parameters,
    optimizer moments and generator state, so the remaining epochs match an
    uninterrupted run exactly. Returns the last checkpoint and the epoch log.
    """
    if cache.num_classes != model_config.num_classes:
        raise ValidationError(
            f"cache holds {cache.num_classes} classes, model predicts {model_config.num_classes}"
        )
    if len(cache.split_indices("train")) == 0:
        raise ValidationError("cache has no training samples")
    has_test = len(cache.split_indices("test")) > 0
    backend = KNN_BACKENDS[train_config.knn]

    if resume is not None:
        if resume.config != model_config:
            raise ContractError("resumed checkpoint was trained with a different model configuration")
        checkpoint = resume
        rng = resume.make_rng()
    else:
        rng = np.random.default_rng(train_config.seed)
        checkpoint = Checkpoint(
            config=model_config,
            params=param_init(model_config, rng),
            adam=AdamState(learning_rate=train_config.learning_rate),
            epoch=0,
            rng_state=rng.bit_generator.state,
            seed=train_config.seed,
        )
    params = checkpoint.params
    batches_per_epoch = num_batches(len(cache.split_indices("train")), train_config.batch_size)

    logs: List[Dict[str, Any]] = []
    for epoch in range(checkpoint.epoch, train_config.epochs):
        started = time.perf_counter()
        lr = step_decay_lr(train_config.learning_rate, epoch, train_config.lr_decay, train_config.lr_decay_every)
        checkpoint.adam.learning_rate = lr
        loss_sum, correct, seen = 0.0, 0, 0
        batches = batch_iter(
            cache,
            "train",
            train_config.batch_size,
            shuffle_seed=train_config.seed,
            augment=train_config.augment,
            epoch=epoch,
        )
        for batch_index, (points, labels) in enumerate(
            tqdm(batches, total=batches_per_epoch, desc=f"Epoch {epoch + 1}", unit="batch", leave=False)
        ):
            with Tape():
                logits = mrfgat_forward_batch(points, params, model_config, "train", rng=rng, knn=backend)
                loss = cross_entropy_with_logits(logits, labels)
                value = loss.item()
                if not math.isfinite(value):
                    raise NonFiniteLossError(epoch + 1, batch_index, value, params.parameter_norms())
                backward(loss)
            adam_step(params.parameters(), checkpoint.adam)
            loss_sum += value * len(labels)
            correct += int((np.argmax(logits.data, axis=1) == labels).sum())
            seen += len(labels)

        entry: Dict[str, Any] = {
            "epoch": epoch + 1,
            "loss": loss_sum / seen,
            "train_acc": correct / seen,
            "test_OA": None,
            "test_MA": None,
            "lr": lr,
        }
        checkpoint.epoch = epoch + 1
        checkpoint.rng_state = rng.bit_generator.state
        evaluate_now = train_config.eval_every > 0 and (epoch + 1) % train_config.eval_every == 0
        if has_test and (evaluate_now or epoch + 1 == train_config.epochs):
            metrics = evaluate(
                checkpoint,
                cache,
                "test",
                train_config.batch_size,
                workers=train_config.workers,
                knn=train_config.knn,
            )
            entry["test_OA"] = metrics.overall_accuracy
            entry["test_MA"] = metrics.mean_class_accuracy
            if checkpoint.best_oa is None or metrics.overall_accuracy > checkpoint.best_oa:
                checkpoint.best_oa = metrics.overall_accuracy
                if train_config.checkpoint_dir:
                    save_checkpoint(checkpoint, os.path.join(train_config.checkpoint_dir, BEST_CHECKPOINT))
        if train_config.checkpoint_dir:
            save_checkpoint(checkpoint, os.path.join(train_config.checkpoint_dir, LAST_CHECKPOINT))
        entry["wall_time"] = time.perf_counter() - started
        logs.append(entry)
        if train_config.log_path:
            _append_log(train_config.log_path, entry)
        emit_progress(
            Stage.TRAINING,
            Status.RUNNING,
            f"Epoch {epoch + 1}/{train_config.epochs}",
            current=epoch + 1,
            total=train_config.epochs,
            loss=entry["loss"],
            train_acc=entry["train_acc"],
            test_OA=entry["test_OA"],
        )
    return checkpoint, logs
