import os
import tempfile
import unittest

from mrfgat.config import (
    ExperimentConfig,
    load_experiment,
    packaged_configs,
    parse_experiment,
    resolve_config_path,
    with_overrides,
)
from mrfgat.dataset import AugmentConfig
from mrfgat.errors import ValidationError
from mrfgat.model import MRFGATConfig
from mrfgat.training import TrainConfig


class TestPackagedExperiments(unittest.TestCase):
    def test_packaged_names(self) -> None:
        self.assertEqual(
            packaged_configs(),
            ["modelnet10-default", "modelnet10-desk", "modelnet40-default", "reduced"],
        )

    def test_modelnet40_matches_the_built_in_defaults(self) -> None:
        experiment = load_experiment("modelnet40-default")

        self.assertEqual(experiment.model, MRFGATConfig())
        self.assertEqual(experiment.train, TrainConfig())
        self.assertEqual(experiment.points, 1024)
        self.assertIsNone(experiment.fraction)

    def test_reduced(self) -> None:
        experiment = load_experiment("reduced")

        self.assertEqual(experiment.model.neighbors, (4, 8))
        self.assertEqual(experiment.model.head, (8,))
        self.assertEqual(experiment.model.num_classes, 4)
        self.assertEqual(experiment.points, 16)
        self.assertIsNone(experiment.train.augment)
        self.assertTrue(experiment.source.endswith("reduced.cfg"))

    def test_desk_run_uses_a_subset(self) -> None:
        experiment = load_experiment("modelnet10-desk")

        self.assertEqual(experiment.fraction, 0.1)
        self.assertEqual((experiment.train.epochs, experiment.train.eval_every), (50, 5))
        self.assertEqual(experiment.model.num_classes, 10)

    def test_none_gives_defaults(self) -> None:
        self.assertEqual(load_experiment(None), ExperimentConfig())


class TestParsing(unittest.TestCase):
    def test_keys_map_onto_dataclasses(self) -> None:
        experiment = parse_experiment(
            {
                "NEIGHBORS": "8,16",
                "CHANNELS": "8,16",
                "EDGE_BRANCH": "no",
                "SHARE_TRANSFORM": "TRUE",
                "LEARNING_RATE": "0.01",
                "AUGMENT_JITTER_SIGMA": "0.02",
                "AUGMENT_ROTATE": "off",
                "FRACTION": "0.25",
            }
        )

        self.assertEqual(experiment.model.channels, (8, 16))
        self.assertFalse(experiment.model.edge_branch)
        self.assertTrue(experiment.model.share_transform)
        self.assertEqual(experiment.train.learning_rate, 0.01)
        self.assertEqual(experiment.train.augment, AugmentConfig(rotate=False, jitter_sigma=0.02))
        self.assertEqual(experiment.fraction, 0.25)

    def test_unknown_key(self) -> None:
        with self.assertRaisesRegex(ValidationError, "WIDTH"):
            parse_experiment({"WIDTH": "3"}, source="x.cfg")

    def test_bad_values(self) -> None:
        for values in ({"EDGE_BRANCH": "maybe"}, {"EPOCHS": "many"}, {"NEIGHBORS": "8,x"}):
            with self.subTest(values=values), self.assertRaises(ValidationError):
                parse_experiment(values)

    def test_values_are_validated_by_the_dataclasses(self) -> None:
        with self.assertRaises(ValidationError):
            parse_experiment({"BATCH_SIZE": "0"})

    def test_file_path(self) -> None:
        with tempfile.TemporaryDirectory() as root:
            path = os.path.join(root, "mine.cfg")
            with open(path, "w") as f:
                f.write("# comment\nEPOCHS=3\nNUM_CLASSES=10\n")

            experiment = load_experiment(path)

        self.assertEqual(experiment.train.epochs, 3)
        self.assertEqual(experiment.model.num_classes, 10)

    def test_unknown_name_or_missing_file(self) -> None:
        with self.assertRaisesRegex(ValidationError, "reduced"):
            resolve_config_path("modelnet99")
        with self.assertRaises(ValidationError):
            resolve_config_path("/nonexistent/run.cfg")


class TestOverrides(unittest.TestCase):
    def test_only_given_values_change(self) -> None:
        config = TrainConfig(epochs=5)

        updated = with_overrides(config, epochs=None, batch_size=2)

        self.assertEqual((updated.epochs, updated.batch_size), (5, 2))
        self.assertIs(with_overrides(config, epochs=None), config)


if __name__ == "__main__":
    unittest.main()
