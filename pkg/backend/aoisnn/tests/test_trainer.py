"""
Tests for configuration, the optimiser, the training loop and ensembles of trained members.
"""

import math
import os
import tempfile
import unittest
from pathlib import Path
from unittest import TestCase

import numpy as np
import pandas as pd
import yaml
from pydantic import ValidationError

from ..config import EvalConfig, SynthConfig, TrainConfig, config_hash, load_config, validate_config
from ..data.synthetic import synth_event_dataset
from ..exceptions import CompatibilityError, ConfigError, ContractError, NumericError
from ..inference import anytime_curve
from ..records import EpochMetrics, RunMetrics
from ..storage import checkpoint_load
from ..tensor import parameter
from ..trainer import (CHECKPOINT_NAME, DIAGNOSTICS_NAME, METRICS_NAME, ModelTrainer, SGDMomentum, cosine_lr,
                       train_ensemble)
from .helpers import tiny_spec, toy_dataset, write_yaml

SMALL_NETWORK = {
    "input_shape": [2, 8, 8],
    "layers": [
        {"kind": "encoder_conv", "filters": 4, "kernel": 3, "stride": 2, "padding": 1},
        {"kind": "avg_pool", "size": 2},
        {"kind": "flatten"},
        {"kind": "dense", "units": 8},
        {"kind": "head", "units": 3},
    ],
}


def small_config(**overrides) -> TrainConfig:
    raw = {"dataset": "in-memory", "network": tiny_spec().model_dump(mode="json"), "T": 3, "epochs": 2,
           "batch_size": 4, "lr": 0.05, "seed": 11}
    raw.update(overrides)
    return validate_config(TrainConfig, raw)


class ConfigTestCase(TestCase):
    """YAML configs and their validation."""

    def test_defaults(self):
        """Desk-scale defaults."""
        config = TrainConfig(dataset="data")
        self.assertEqual((config.T, config.epochs, config.lr, config.momentum), (10, 30, 0.1, 0.9))
        self.assertEqual((config.loss, config.alpha, config.shift_frac), ("tet", 0.0, 0.2))
        self.assertEqual(config.network_spec((2, 16, 16), 3).num_classes, 3)
        self.assertEqual(EvalConfig().thresholds, "0.8:1.0:20")
        self.assertEqual(SynthConfig().classes, 3)

    def test_error_names_field(self):
        """Validation failures become config errors naming the field path."""
        with self.assertRaises(ConfigError) as ctx:
            validate_config(TrainConfig, {"dataset": "data", "alpha": -1.0})
        self.assertEqual(ctx.exception.field, "alpha")
        with self.assertRaises(ConfigError) as ctx:
            validate_config(TrainConfig, {"dataset": "data", "lif": {"tau": 2.0}})
        self.assertEqual(ctx.exception.field, "lif.tau")
        with self.assertRaises(ConfigError) as ctx:
            validate_config(TrainConfig, {"dataset": "data", "shift_frac": 0.3})
        self.assertEqual(ctx.exception.field, "shift_frac")

    def test_load_with_overrides(self):
        """File values are replaced by non-None overrides."""
        with tempfile.TemporaryDirectory() as tmp:
            path = write_yaml(Path(tmp) / "train.yaml", {"dataset": "data", "epochs": 4, "seed": 1})
            config = load_config(TrainConfig, path, {"seed": 9, "T": None})
            self.assertEqual((config.epochs, config.seed, config.T), (4, 9, 10))
            broken = Path(tmp) / "broken.yaml"
            broken.write_text("epochs: [1,\n")
            with self.assertRaises(ConfigError):
                load_config(TrainConfig, broken)
            with self.assertRaises(ConfigError) as ctx:
                load_config(TrainConfig, Path(tmp) / "absent.yaml")
            self.assertEqual(ctx.exception.field, "config")

    def test_hash(self):
        """Equal configs hash equally; any change alters the hash."""
        self.assertEqual(config_hash(small_config()), config_hash(small_config()))
        self.assertNotEqual(config_hash(small_config()), config_hash(small_config(alpha=0.5)))


class ScheduleTestCase(TestCase):
    """Cosine decay and momentum SGD."""

    def test_cosine(self):
        """lr0 at the start, half at mid-run, zero at the end."""
        self.assertEqual(cosine_lr(0.1, 0, 30), 0.1)
        self.assertAlmostEqual(cosine_lr(0.1, 15, 30), 0.05)
        self.assertEqual(cosine_lr(0.1, 30, 30), 0.0)
        self.assertAlmostEqual(cosine_lr(0.1, 10, 30), 0.1 * (1 + math.cos(math.pi / 3)) / 2)
        with self.assertRaises(ConfigError):
            cosine_lr(0.1, 31, 30)

    def test_momentum_step(self):
        """Velocity accumulates decayed gradients plus weight decay."""
        w = parameter(np.array([1.0, -2.0]))
        optimizer = SGDMomentum([w], momentum=0.9, weight_decay=0.1)
        w.grad = np.array([0.5, 0.5])
        optimizer.step(0.1)
        np.testing.assert_allclose(w.data, [1.0 - 0.1 * 0.6, -2.0 - 0.1 * 0.3])
        first = w.data.copy()
        w.grad = np.zeros(2)
        optimizer.step(0.1)
        velocity = 0.9 * np.array([0.6, 0.3]) + 0.1 * first
        np.testing.assert_allclose(w.data, first - 0.1 * velocity)

    def test_clipped_step(self):
        """A huge gradient is rescaled to the clip norm; the returned norm is the raw one."""
        w = parameter(np.array([1.0, 1.0]))
        optimizer = SGDMomentum([w], momentum=0.9, weight_decay=0.0, grad_clip=5.0)
        w.grad = np.array([3e8, 4e8])
        self.assertAlmostEqual(optimizer.step(0.1), 5e8)
        np.testing.assert_allclose(w.data, [1.0 - 0.3, 1.0 - 0.4])

    def test_small_gradient_unclipped(self):
        """Gradients under the clip norm are applied as they are."""
        clipped, plain = parameter(np.array([1.0, 1.0])), parameter(np.array([1.0, 1.0]))
        for w, clip in ((clipped, 5.0), (plain, 0.0)):
            w.grad = np.array([0.3, -0.4])
            SGDMomentum([w], weight_decay=0.0, grad_clip=clip).step(0.1)
        np.testing.assert_array_equal(clipped.data, plain.data)

    def test_clip_defaults(self):
        """Training clips at norm 5 and floors the residual norm at 1e-3 unless configured."""
        config = TrainConfig(dataset="unused")
        self.assertEqual(config.grad_clip, 5.0)
        self.assertEqual(config.stf_floor, 1e-3)
        with self.assertRaises(ValidationError):
            TrainConfig(dataset="unused", grad_clip=-1.0)

    def test_skips_untouched_parameters(self):
        """Parameters without gradients are left alone."""
        w = parameter(np.array([1.0]))
        SGDMomentum([w]).step(0.1)
        np.testing.assert_array_equal(w.data, [1.0])


class TrainingLoopTestCase(TestCase):
    """Training on in-memory datasets."""

    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.addCleanup(self.tmp.cleanup)
        self.root = Path(self.tmp.name)
        rng = np.random.default_rng(0)
        self.train = toy_dataset(rng, tiny_spec(), 10, 3)
        self.test = toy_dataset(rng, tiny_spec(), 6, 3)

    def fit(self, name: str, **overrides) -> ModelTrainer:
        trainer = ModelTrainer(small_config(**overrides), self.root / name, progress=False)
        trainer.create_network(tiny_spec().input_shape, 3)
        trainer.train(self.train, self.test)
        return trainer

    def test_same_seed_same_checkpoint(self):
        """Two runs with one seed write byte-identical checkpoints."""
        a = self.fit("a").save_checkpoint()
        b = self.fit("b").save_checkpoint()
        self.assertEqual(a.read_bytes(), b.read_bytes())
        c = self.fit("c", seed=12).save_checkpoint()
        self.assertNotEqual(a.read_bytes(), c.read_bytes())

    def test_alpha_zero_ignores_regulariser_options(self):
        """With alpha 0 the regulariser settings cannot change the trained weights."""
        baseline = self.fit("tet")
        other = self.fit("tet2", correctness_mode="per_sample", stop_grad_max=False)
        for a, b in zip(baseline.network.parameters(), other.network.parameters()):
            np.testing.assert_array_equal(a.data, b.data)
        self.assertTrue(all(row.str_penalty == 0.0 for row in baseline.metrics.rows))

    def seen_inputs(self, name: str, **overrides) -> np.ndarray:
        trainer = ModelTrainer(small_config(epochs=1, **overrides), self.root / name, progress=False)
        trainer.create_network(tiny_spec().input_shape, 3)
        seen = []
        step = trainer.train_step

        def recording_step(inputs, labels):
            seen.append(inputs.copy())
            return step(inputs, labels)

        trainer.train_step = recording_step
        trainer.train(self.train)
        return np.concatenate(seen)

    def test_shift_only_for_events(self):
        """Event-mode batches are pixel-shifted; frame-mode batches reach the step untouched."""
        shifted = self.seen_inputs("shift", shift_frac=0.2)
        plain = self.seen_inputs("noshift", shift_frac=0.0)
        self.assertFalse(np.array_equal(shifted, plain))
        self.assertLessEqual(shifted.sum(), plain.sum())
        rng = np.random.default_rng(5)
        self.train = toy_dataset(rng, tiny_spec(), 10, 3, mode="frame")
        frame_shifted = self.seen_inputs("frame_shift", mode="frame", shift_frac=0.2)
        frame_plain = self.seen_inputs("frame_noshift", mode="frame", shift_frac=0.0)
        np.testing.assert_array_equal(frame_shifted, frame_plain)

    def test_regularised_run(self):
        """A positive alpha trains and reports its penalty per epoch."""
        trainer = self.fit("str", alpha=0.5)
        self.assertEqual(len(trainer.metrics), 2)
        for row in trainer.metrics.rows:
            self.assertGreaterEqual(row.str_penalty, 0.0)
            self.assertAlmostEqual(row.total_loss, row.task_loss + 0.5 * row.str_penalty, places=10)

    def test_metrics_rows(self):
        """One row per epoch with per-timestep test accuracy and per-layer statistics."""
        trainer = self.fit("m", epochs=3, eval_every=2)
        rows = trainer.metrics.rows
        self.assertEqual([row.epoch for row in rows], [1, 2, 3])
        self.assertEqual(rows[0].test_accuracy, [])
        self.assertEqual(len(rows[1].test_accuracy), 3)
        self.assertEqual(len(rows[2].stf_mean), 2)
        self.assertEqual(len(rows[2].firing_rates), 2)
        self.assertAlmostEqual(rows[0].lr, 0.05)
        frame = trainer.metrics.to_frame()
        self.assertEqual(len(frame), 3)
        for column in ("test_acc_t1", "test_acc_t3", "stf_mean_l1", "firing_rate_l2"):
            self.assertIn(column, frame.columns)

    def test_evaluation_shapes(self):
        """Evaluation reports T accuracies and an (L, T) factor table."""
        trainer = self.fit("e", epochs=1)
        evaluation = trainer.evaluate(self.test, batch_size=4)
        self.assertEqual(evaluation.accuracy.shape, (3,))
        self.assertEqual(evaluation.stf_means.shape, (2, 3))
        self.assertTrue(np.all((evaluation.firing_rates >= 0) & (evaluation.firing_rates <= 1)))

    def test_numeric_failure_writes_diagnostics(self):
        """A NaN loss aborts training and leaves a diagnostics file."""
        trainer = ModelTrainer(small_config(), self.root / "nan", progress=False)
        trainer.create_network(tiny_spec().input_shape, 3)
        trainer.network.params["layers.4.bias"].data[0] = np.nan
        with self.assertRaises(NumericError):
            trainer.train(self.train)
        with open(self.root / "nan" / DIAGNOSTICS_NAME) as f:
            report = yaml.safe_load(f)
        self.assertEqual(report["epoch"], 1)
        self.assertFalse(report["parameters"]["layers.4.bias"]["finite"])

    def test_incompatible_network(self):
        """A configured network that does not fit the dataset is rejected."""
        trainer = ModelTrainer(small_config(), self.root / "bad", progress=False)
        with self.assertRaises(CompatibilityError):
            trainer.create_network((2, 6, 6), 3)
        with self.assertRaises(CompatibilityError):
            trainer.create_network(tiny_spec().input_shape, 4)

    def test_metrics_append_order(self):
        """Rows must arrive in epoch order."""
        metrics = RunMetrics()
        row = dict(lr=0.1, task_loss=1.0, str_penalty=0.0, total_loss=1.0, train_accuracy=0.5)
        metrics.append(EpochMetrics(epoch=1, **row))
        with self.assertRaises(ContractError):
            metrics.append(EpochMetrics(epoch=3, **row))


class DatasetRunTestCase(TestCase):
    """Full runs against a synthetic dataset on disk."""

    @classmethod
    def setUpClass(cls):
        cls.tmp = tempfile.TemporaryDirectory()
        cls.root = Path(cls.tmp.name)
        synth_event_dataset(cls.root / "data", classes=3, samples_per_class=4, height=8, width=8, T=3,
                            window_us=10_000, rate=2e-3, noise_rate=0.0, seed=2)

    @classmethod
    def tearDownClass(cls):
        cls.tmp.cleanup()

    def config(self, **overrides) -> TrainConfig:
        return small_config(dataset=str(self.root / "data"), network=SMALL_NETWORK, **overrides)

    def test_run_writes_outputs(self):
        """A run leaves a checkpoint with metadata and a metrics table."""
        out = self.root / "run"
        result = ModelTrainer(self.config(), out, progress=False).run()
        self.assertEqual(result.checkpoint, out / CHECKPOINT_NAME)
        checkpoint = checkpoint_load(result.checkpoint)
        self.assertEqual(checkpoint.meta["epoch"], 2)
        self.assertEqual(checkpoint.meta["mode"], "event")
        self.assertEqual(checkpoint.meta["T"], 3)
        self.assertEqual(len(pd.read_csv(out / METRICS_NAME)), 2)
        self.assertTrue(0.0 <= result.final_accuracy <= 1.0)

    def test_mode_mismatch(self):
        """Frame training on an event dataset is a config error."""
        with self.assertRaises(ConfigError):
            ModelTrainer(self.config(mode="frame"), self.root / "frame", progress=False).prepare_data()

    def test_ensemble_members(self):
        """Member i trains with seed + i and reproduces a standalone run of that seed."""
        paths = train_ensemble(self.config(), 2, self.root / "ensemble")
        self.assertEqual([p.parent.name for p in paths], ["member_1", "member_2"])
        self.assertNotEqual(paths[0].read_bytes(), paths[1].read_bytes())
        single = ModelTrainer(self.config(seed=12), self.root / "seed12", progress=False).run()
        self.assertEqual(single.checkpoint.read_bytes(), paths[1].read_bytes())
        with self.assertRaises(ConfigError):
            train_ensemble(self.config(), 0, self.root / "none")


@unittest.skipUnless(os.environ.get("AOISNN_RUN_SLOW") == "1", "set AOISNN_RUN_SLOW=1 to run desk-scale training")
class DeskScaleTrainingTestCase(TestCase):
    """TET and TET + STR on the synthetic 3-class event set, 30 epochs, three seeds."""

    def final_accuracy(self, root: Path, alpha: float, seed: int) -> float:
        config = TrainConfig(dataset=str(root / "data"), T=10, epochs=30, alpha=alpha, seed=seed)
        trainer = ModelTrainer(config, root / f"run_{alpha}_{seed}", progress=False)
        train, test = trainer.prepare_data()
        trainer.train(train, test)
        return float(anytime_curve(trainer.network, test, config.T)[-1])

    def test_regularised_matches_plain(self):
        """Both variants reach 90% at t = T and STR stays within two points of TET on every seed."""
        with tempfile.TemporaryDirectory() as tmp:
            root = Path(tmp)
            synth_event_dataset(root / "data", classes=3, samples_per_class=100, height=16, width=16, T=10, seed=0)
            for seed in range(3):
                with self.subTest(seed=seed):
                    tet = self.final_accuracy(root, 0.0, seed)
                    regularised = self.final_accuracy(root, 0.5, seed)
                    self.assertGreaterEqual(tet, 0.9)
                    self.assertGreaterEqual(regularised, 0.9)
                    self.assertGreaterEqual(regularised, tet - 0.02)
