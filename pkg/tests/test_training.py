import json
import os
import tempfile
import unittest
from dataclasses import replace
from unittest.mock import patch

import numpy as np
import pytest

from mrfgat.autodiff import as_tensor
from mrfgat.cachefile import CacheFile
from mrfgat.checkpoint import load_checkpoint
from mrfgat.dataset import AugmentConfig
from mrfgat.errors import NonFiniteLossError, ValidationError
from mrfgat.geometry import PointCloud, normalize_unit_sphere
from mrfgat.model import MRFGATConfig
from mrfgat.training import (
    TrainConfig,
    evaluate,
    metrics_from_confusion,
    metrics_from_predictions,
    train,
)

TINY = MRFGATConfig(
    neighbors=(4, 8),
    channels=(4, 8),
    shared_mlp=(8, 8),
    global_width=16,
    head=(8,),
    num_classes=2,
    keep_prob=1.0,
)


def _fixture(per_class: int = 8, test_per_class: int = 0, n: int = 16, seed: int = 0) -> CacheFile:
    """Two separable shapes: points along a line and points in a plane."""
    rng = np.random.default_rng(seed)
    clouds, labels, splits = [], [], []
    for split, count in ((0, per_class), (1, test_per_class)):
        for _ in range(count):
            line = np.outer(rng.uniform(-1, 1, n), [1.0, 0.2, 0.0]) + rng.normal(scale=0.02, size=(n, 3))
            plane = np.column_stack([rng.uniform(-1, 1, (n, 2)), rng.normal(scale=0.02, size=n)])
            for label, points in ((0, line), (1, plane)):
                clouds.append(normalize_unit_sphere(PointCloud(points)).points)
                labels.append(label)
                splits.append(split)
    return CacheFile(class_names=["line", "plane"], points=np.array(clouds), labels=labels, splits=splits)


class TestMetrics(unittest.TestCase):
    def test_perfect_predictor(self) -> None:
        labels = [0, 1, 2, 2, 1]
        metrics = metrics_from_predictions(labels, labels, 3)

        self.assertEqual((metrics.overall_accuracy, metrics.mean_class_accuracy), (1.0, 1.0))

    def test_constant_predictor_on_balanced_classes(self) -> None:
        metrics = metrics_from_predictions([0, 0, 1, 1], [0, 0, 0, 0], 2)

        self.assertEqual(metrics.overall_accuracy, 0.5)
        self.assertEqual(metrics.mean_class_accuracy, 0.5)
        self.assertEqual(metrics.per_class, [1.0, 0.0])

    def test_values_follow_from_the_confusion_matrix(self) -> None:
        rng = np.random.default_rng(3)
        labels = rng.integers(0, 5, size=200)
        predictions = np.where(rng.random(200) < 0.7, labels, rng.integers(0, 5, size=200))

        metrics = metrics_from_predictions(labels, predictions, 5)

        confusion = metrics.confusion
        self.assertEqual(int(confusion.sum()), 200)
        self.assertEqual(metrics.overall_accuracy, np.trace(confusion) / confusion.sum())
        per_class = [confusion[i, i] / confusion[i].sum() for i in range(5)]
        self.assertEqual(metrics.mean_class_accuracy, sum(per_class) / 5)

    def test_classes_without_support_are_excluded_and_flagged(self) -> None:
        with self.assertLogs("mrfgat.training", level="WARNING"):
            metrics = metrics_from_confusion(np.array([[3, 1, 0], [0, 0, 0], [0, 0, 2]]))

        self.assertEqual(metrics.unsupported_classes, [1])
        self.assertIsNone(metrics.per_class[1])
        self.assertEqual(metrics.mean_class_accuracy, (0.75 + 1.0) / 2)
        self.assertEqual(metrics.overall_accuracy, 5 / 6)
        self.assertEqual(json.loads(json.dumps(metrics.to_dict()))["per_class"], [0.75, None, 1.0])

    def test_empty_and_mismatched_inputs(self) -> None:
        with self.assertRaises(ValidationError):
            metrics_from_confusion(np.zeros((2, 2)))
        with self.assertRaises(ValidationError):
            metrics_from_predictions([0, 1], [0], 2)
        with self.assertRaises(ValidationError):
            metrics_from_predictions([0, 2], [0, 1], 2)


class TestTrainConfig(unittest.TestCase):
    def test_defaults(self) -> None:
        config = TrainConfig()

        self.assertEqual((config.batch_size, config.learning_rate, config.epochs), (16, 1e-3, 250))
        self.assertEqual((config.lr_decay, config.lr_decay_every), (0.7, 20))
        self.assertEqual(config.augment, AugmentConfig())

    def test_validation(self) -> None:
        with self.assertRaises(ValidationError):
            TrainConfig(batch_size=0)
        with self.assertRaises(ValidationError):
            TrainConfig(learning_rate=0.0)
        with self.assertRaises(ValidationError):
            TrainConfig(knn="octree")


class TestTraining(unittest.TestCase):
    def test_first_update_lowers_the_loss(self) -> None:
        config = TrainConfig(epochs=2, batch_size=16, seed=1, augment=None)

        _, logs = train(_fixture(), TINY, config)

        self.assertEqual([entry["epoch"] for entry in logs], [1, 2])
        self.assertLess(logs[1]["loss"], logs[0]["loss"])
        self.assertTrue(all(np.isfinite(entry["loss"]) for entry in logs))

    @pytest.mark.slow
    def test_overfits_the_two_class_fixture(self) -> None:
        config = TrainConfig(epochs=200, batch_size=4, seed=2, augment=None)

        _, logs = train(_fixture(), TINY, config)

        self.assertGreaterEqual(max(entry["train_acc"] for entry in logs), 0.95)

    def test_identical_seeds_give_identical_runs(self) -> None:
        model = replace(TINY, keep_prob=0.5)
        config = TrainConfig(epochs=3, batch_size=5, seed=9)

        first, first_logs = train(_fixture(), model, config)
        second, second_logs = train(_fixture(), model, config)

        self.assertEqual([e["loss"] for e in first_logs], [e["loss"] for e in second_logs])
        for name, array in first.params.state_arrays().items():
            np.testing.assert_array_equal(array, second.params.state_arrays()[name], err_msg=name)

    def test_resumed_run_continues_the_trajectory(self) -> None:
        model = replace(TINY, keep_prob=0.5)
        cache = _fixture(per_class=6, test_per_class=2)
        with tempfile.TemporaryDirectory() as root:
            straight_dir = os.path.join(root, "straight")
            split_dir = os.path.join(root, "split")
            _, straight = train(cache, model, TrainConfig(epochs=4, batch_size=4, seed=3, checkpoint_dir=straight_dir))
            train(cache, model, TrainConfig(epochs=2, batch_size=4, seed=3, checkpoint_dir=split_dir))
            resume = load_checkpoint(os.path.join(split_dir, "last.ckpt"))
            final, resumed = train(
                cache, model, TrainConfig(epochs=4, batch_size=4, seed=3, checkpoint_dir=split_dir), resume=resume
            )
            uninterrupted = load_checkpoint(os.path.join(straight_dir, "last.ckpt"))
            self.assertTrue(os.path.exists(os.path.join(straight_dir, "best.ckpt")))

        self.assertEqual([e["epoch"] for e in resumed], [3, 4])
        self.assertEqual([e["loss"] for e in resumed], [e["loss"] for e in straight[2:]])
        self.assertEqual([e["test_OA"] for e in resumed], [e["test_OA"] for e in straight[2:]])
        for name, array in uninterrupted.params.state_arrays().items():
            np.testing.assert_array_equal(final.params.state_arrays()[name], array, err_msg=name)

    def test_epoch_log_is_json_lines(self) -> None:
        with tempfile.TemporaryDirectory() as root:
            log_path = os.path.join(root, "logs", "train.jsonl")
            train(_fixture(per_class=3, test_per_class=1), TINY, TrainConfig(epochs=2, batch_size=4, log_path=log_path))
            with open(log_path, encoding="utf-8") as f:
                entries = [json.loads(line) for line in f]

        self.assertEqual(len(entries), 2)
        self.assertEqual(
            set(entries[0]),
            {"epoch", "loss", "train_acc", "test_OA", "test_MA", "lr", "wall_time"},
        )
        self.assertIsNotNone(entries[1]["test_OA"])

    def test_non_finite_loss_aborts_with_diagnostics(self) -> None:
        with patch("mrfgat.training.cross_entropy_with_logits", return_value=as_tensor(np.nan)):
            with self.assertRaises(NonFiniteLossError) as raised:
                train(_fixture(per_class=2), TINY, TrainConfig(epochs=1, batch_size=4))

        self.assertEqual((raised.exception.epoch, raised.exception.batch_index), (1, 0))
        self.assertIn("classifier.weight", raised.exception.parameter_norms)

    def test_class_count_must_match(self) -> None:
        with self.assertRaises(ValidationError):
            train(_fixture(per_class=2), replace(TINY, num_classes=3), TrainConfig(epochs=1))


class TestEvaluate(unittest.TestCase):
    def test_evaluation_leaves_the_model_untouched(self) -> None:
        cache = _fixture(per_class=3, test_per_class=2)
        checkpoint, _ = train(cache, TINY, TrainConfig(epochs=1, batch_size=4, augment=None))
        before = {name: array.copy() for name, array in checkpoint.params.state_arrays().items()}

        metrics = evaluate(checkpoint, cache, "test", batch_size=3)
        parallel = evaluate(checkpoint, cache, "test", batch_size=3, workers=2)

        self.assertEqual(int(metrics.confusion.sum()), 4)
        np.testing.assert_array_equal(metrics.confusion, parallel.confusion)
        for name, array in checkpoint.params.state_arrays().items():
            np.testing.assert_array_equal(array, before[name], err_msg=name)

    def test_class_mismatch(self) -> None:
        checkpoint, _ = train(_fixture(per_class=2), TINY, TrainConfig(epochs=1, batch_size=4))
        other = CacheFile(class_names=["a", "b", "c"], points=np.zeros((1, 16, 3)), labels=[0], splits=[1])

        with self.assertRaises(ValidationError):
            evaluate(checkpoint, other)


if __name__ == "__main__":
    unittest.main()
