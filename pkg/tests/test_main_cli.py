import contextlib
import importlib.util
import io
import json
import os
import tempfile
import unittest
from unittest.mock import MagicMock, patch

import numpy as np
import pytest

from mrfgat import cli
from mrfgat.autodiff import LeakyReLU
from mrfgat.config import ExperimentConfig, load_experiment
from mrfgat.geometry import NeighborGraph
from mrfgat.model import MRFGATConfig
from mrfgat.progress import PROGRESS_PREFIX
from mrfgat.training import metrics_from_predictions

TETRAHEDRON = "OFF\n4 4 0\n0 0 0\n1 0 0\n0 1 0\n0 0 1\n3 0 1 2\n3 0 1 3\n3 0 2 3\n3 1 2 3\n"

SMALL_EXPERIMENT = """POINTS=16
NEIGHBORS=4,8
CHANNELS=4,8
SHARED_MLP=8,8
GLOBAL_WIDTH=16
HEAD=8
NUM_CLASSES=2
KEEP_PROB=1.0
EPOCHS=1
BATCH_SIZE=2
AUGMENT=false
"""


def _run(argv):
    out, err = io.StringIO(), io.StringIO()
    with contextlib.redirect_stdout(out), contextlib.redirect_stderr(err):
        code = cli.main(argv)
    return code, out.getvalue(), err.getvalue()


def _human_lines(output: str):
    return [line for line in output.splitlines() if not line.startswith(PROGRESS_PREFIX)]


def _write_tree(root: str) -> None:
    for name in ("bed", "chair"):
        for split in ("train", "test"):
            directory = os.path.join(root, name, split)
            os.makedirs(directory)
            with open(os.path.join(directory, f"{name}_0001.off"), "w") as f:
                f.write(TETRAHEDRON)


class TestCliArguments(unittest.TestCase):
    def test_unknown_flags_and_missing_command_are_usage_errors(self) -> None:
        for argv in (["train", "--verbose"], [], ["eval"], ["unknown"]):
            with self.subTest(argv=argv), contextlib.redirect_stderr(io.StringIO()):
                with self.assertRaises(SystemExit) as raised:
                    cli.parse_args(argv)
                self.assertEqual(raised.exception.code, 2)

    def test_shared_flags_are_only_accepted_where_they_act(self) -> None:
        rejected = (
            ["bench-knn", "--config", "reduced"],
            ["bench-knn", "--deterministic"],
            ["gradcheck", "--deterministic"],
            ["eval", "--checkpoint", "x.ckpt", "--seed", "3"],
            ["inspect", "x.bin", "--seed", "3"],
        )
        for argv in rejected:
            with self.subTest(argv=argv), contextlib.redirect_stderr(io.StringIO()):
                with self.assertRaises(SystemExit) as raised:
                    cli.parse_args(argv)
                self.assertEqual(raised.exception.code, 2)
        self.assertEqual(cli.parse_args(["bench-knn", "--seed", "5"]).seed, 5)
        self.assertTrue(cli.parse_args(["eval", "--checkpoint", "x.ckpt", "--deterministic"]).deterministic)

    def test_config_from_args_applies_overrides(self) -> None:
        args = cli.parse_args(
            ["train", "--cache", "c.bin", "--config", "reduced", "--epochs", "3", "--seed", "7"]
        )

        experiment = cli.config_from_args(args)

        self.assertIsInstance(experiment, ExperimentConfig)
        self.assertEqual(experiment.train.epochs, 3)
        self.assertEqual(experiment.train.seed, 7)
        self.assertEqual(experiment.train.batch_size, 4)
        self.assertEqual(experiment.train.checkpoint_dir, "checkpoints")
        self.assertEqual(experiment.train.log_path, os.path.join("checkpoints", "train.jsonl"))

    def test_defaults_follow_the_modelnet40_run(self) -> None:
        experiment = cli.config_from_args(cli.parse_args(["train", "--cache", "c.bin"]))

        self.assertEqual(experiment.model.num_classes, 40)
        self.assertEqual(experiment.train.learning_rate, 1e-3)

    def test_deterministic_forces_one_worker(self) -> None:
        args = cli.parse_args(["train", "--cache", "c.bin", "--workers", "4", "--deterministic"])

        self.assertEqual(cli.config_from_args(args).train.workers, 1)

    def test_compatibility_wrapper_delegates_to_package_cli(self) -> None:
        root = os.path.abspath(os.path.join(os.path.dirname(__file__), ".."))
        wrapper_path = os.path.join(root, "src", "main.py")
        spec = importlib.util.spec_from_file_location("mrfgat_compat_main", wrapper_path)
        self.assertIsNotNone(spec)
        self.assertIsNotNone(spec.loader)
        module = importlib.util.module_from_spec(spec)
        spec.loader.exec_module(module)

        with patch("mrfgat.cli.main", return_value=0) as package_main:
            self.assertEqual(module.main(), 0)

        package_main.assert_called_once_with()


class TestExitCodes(unittest.TestCase):
    def test_prepare_on_a_missing_directory_is_a_usage_error(self) -> None:
        with contextlib.redirect_stderr(io.StringIO()) as err, self.assertRaises(SystemExit) as raised:
            cli.main(["prepare", "--raw", "/nonexistent/modelnet", "--out", "cache.bin"])

        self.assertEqual(raised.exception.code, 2)
        self.assertIn("not found", err.getvalue())

    def test_runtime_failures_return_one(self) -> None:
        code, _, err = _run(["bench-knn", "--n", "4", "--k", "8"])

        self.assertEqual(code, 1)
        self.assertIn("Error:", err)

    def test_missing_cache_file_returns_one(self) -> None:
        code, _, err = _run(["eval", "--cache", "/nonexistent/cache.bin", "--checkpoint", "x.ckpt"])

        self.assertEqual(code, 1)
        self.assertIn("Error:", err)


class TestSubcommands(unittest.TestCase):
    def _patched_eval(self, argv):
        metrics = metrics_from_predictions([0, 1, 1], [0, 1, 1], 2)
        cache = MagicMock(class_names=["bed", "chair"])
        with patch("mrfgat.pipeline.read_cache", return_value=cache), \
            patch("mrfgat.pipeline.load_checkpoint") as load, \
            patch("mrfgat.pipeline.evaluate", return_value=metrics) as evaluate:
            result = _run(argv)
        load.assert_called_once_with("run/best.ckpt")
        evaluate.assert_called_once()
        return result

    def test_eval_prints_accuracies(self) -> None:
        code, output, _ = self._patched_eval(["eval", "--cache", "c.bin", "--checkpoint", "run/best.ckpt"])

        self.assertEqual(code, 0)
        self.assertIn("OA=1.0000 MA=1.0000", output)
        self.assertIn("chair", output)

    def test_eval_json(self) -> None:
        code, output, _ = self._patched_eval(
            ["eval", "--cache", "c.bin", "--checkpoint", "run/best.ckpt", "--json"]
        )

        report = json.loads(_human_lines(output)[-1])
        self.assertEqual(code, 0)
        self.assertEqual((report["OA"], report["MA"]), (1.0, 1.0))
        self.assertEqual(report["confusion"], [[1, 0], [0, 2]])

    def test_eval_config_must_match_the_checkpoint_model(self) -> None:
        metrics = metrics_from_predictions([0, 1], [0, 1], 2)
        cache = MagicMock(class_names=["bed", "chair"])
        argv = ["eval", "--cache", "c.bin", "--checkpoint", "run/best.ckpt", "--config", "reduced"]
        for model, code in ((load_experiment("reduced").model, 0), (MRFGATConfig(), 1)):
            with self.subTest(expected_code=code), \
                patch("mrfgat.pipeline.read_cache", return_value=cache), \
                patch("mrfgat.pipeline.load_checkpoint", return_value=MagicMock(config=model)), \
                patch("mrfgat.pipeline.evaluate", return_value=metrics) as evaluate:
                result, _, err = _run(argv)
            self.assertEqual(result, code)
            self.assertEqual(evaluate.called, code == 0)
            if code:
                self.assertIn("differs from the experiment", err)

    def test_bench_knn_small(self) -> None:
        code, output, _ = _run(["bench-knn", "--n", "64", "--k", "8", "--repeat", "2"])

        self.assertEqual(code, 0)
        self.assertIn("backends agree on all 2 clouds", output)

    def test_bench_knn_disagreement_fails(self) -> None:
        def wrong(pc, k):
            indices = np.zeros((pc.num_points, k), dtype=np.int64)
            return NeighborGraph(k=k, indices=indices, edges=pc.points[:, None, :] - pc.points[indices])

        with patch("mrfgat.pipeline.knn_graph_indexed", side_effect=wrong):
            code, _, err = _run(["bench-knn", "--n", "32", "--k", "4", "--repeat", "1"])

        self.assertEqual(code, 1)
        self.assertIn("disagree", err)

    @pytest.mark.slow
    def test_gradcheck_passes_on_the_reduced_network(self) -> None:
        code, output, _ = _run(["gradcheck"])

        self.assertEqual(code, 0)
        self.assertIn("PASS", output)

    @pytest.mark.slow
    def test_gradcheck_catches_a_broken_backward(self) -> None:
        with patch.object(LeakyReLU, "backward", lambda self, grad: (2.0 * grad,)):
            code, output, _ = _run(["gradcheck"])

        self.assertEqual(code, 1)
        self.assertIn("FAIL", output)
        self.assertIn("scale", output.split("FAIL:")[1])

    def test_prepare_train_eval_inspect(self) -> None:
        with tempfile.TemporaryDirectory() as root:
            raw = os.path.join(root, "raw")
            _write_tree(raw)
            cache = os.path.join(root, "cache.bin")
            experiment = os.path.join(root, "small.cfg")
            with open(experiment, "w") as f:
                f.write(SMALL_EXPERIMENT)
            run_dir = os.path.join(root, "run")

            first = _run(["prepare", "--raw", raw, "--out", cache, "--config", experiment])
            second = _run(["prepare", "--raw", raw, "--out", cache, "--config", experiment])
            trained = _run(["train", "--cache", cache, "--config", experiment, "--checkpoint-dir", run_dir])
            evaluated = _run(
                ["eval", "--cache", cache, "--checkpoint", os.path.join(run_dir, "last.ckpt"), "--json"]
            )
            inspected = _run(["inspect", cache])
            checkpoint_info = _run(["inspect", os.path.join(run_dir, "last.ckpt"), "--config", "reduced"])
            with open(os.path.join(run_dir, "train.jsonl"), encoding="utf-8") as f:
                log = [json.loads(line) for line in f]

        self.assertEqual(first[0], 0)
        self.assertIn("train=2 test=2", first[1])
        self.assertIn("cache written", first[1])
        self.assertIn("cache unchanged", second[1])
        self.assertEqual(trained[0], 0)
        self.assertEqual([entry["epoch"] for entry in log], [1])
        self.assertEqual(evaluated[0], 0)
        self.assertEqual(sum(map(sum, json.loads(_human_lines(evaluated[1])[-1])["confusion"])), 2)
        self.assertEqual(inspected[0], 0)
        self.assertIn("points per cloud: 16", inspected[1])
        self.assertIn("epoch: 1", checkpoint_info[1])
        self.assertIn("param_count:", checkpoint_info[1])


if __name__ == "__main__":
    unittest.main()
