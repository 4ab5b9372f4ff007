"""
Tests for ensemble means and per-timestep uncertainty.
"""

import math
import tempfile
from pathlib import Path
from unittest import TestCase

import numpy as np

from ..exceptions import CompatibilityError, ContractError, DimensionError
from ..ensemble import Ensemble, UncertaintyCurve, ensemble_mean, ensemble_variance, load_ensemble, uncertainty_curve
from ..network import SpikingNetwork
from ..storage import checkpoint_save
from .helpers import scaled_network, tiny_spec, toy_dataset


class EnsembleMeanTestCase(TestCase):
    """Elementwise member mean."""

    def test_single_member(self):
        """One member is its own mean."""
        np.testing.assert_array_equal(ensemble_mean([[0.3, -1.0, 2.5]]).data, [0.3, -1.0, 2.5])

    def test_two_members(self):
        """[1, 0] and [0, 1] average to [0.5, 0.5]."""
        np.testing.assert_array_equal(ensemble_mean([[1.0, 0.0], [0.0, 1.0]]).data, [0.5, 0.5])

    def test_linear(self):
        """mean(a * f + b) = a * mean(f) + b."""
        rng = np.random.default_rng(0)
        outputs = rng.normal(size=(4, 5, 3))
        a, b = 2.5, -0.75
        np.testing.assert_allclose(ensemble_mean(list(a * outputs + b)).data,
                                   a * ensemble_mean(list(outputs)).data + b, atol=1e-12)

    def test_errors(self):
        """No members, or members of different shapes."""
        with self.assertRaises(ContractError):
            ensemble_mean([])
        with self.assertRaises(DimensionError):
            ensemble_mean([[1.0, 0.0], [1.0, 0.0, 0.0]])


class EnsembleVarianceTestCase(TestCase):
    """Mean L2 deviation from the ensemble mean."""

    def test_opposite_members(self):
        """Each deviation has norm sqrt(0.5)."""
        outputs = [[1.0, 0.0], [0.0, 1.0]]
        sigma2 = ensemble_variance(outputs, ensemble_mean(outputs)).item()
        self.assertAlmostEqual(sigma2, 0.70711, places=5)
        squared = ensemble_variance(outputs, ensemble_mean(outputs), squared=True).item()
        self.assertAlmostEqual(squared, 0.5)

    def test_identical_members(self):
        """Agreeing members have no spread."""
        outputs = [[0.2, 1.7, -0.4]] * 2
        self.assertEqual(ensemble_variance(outputs, ensemble_mean(outputs)).item(), 0.0)

    def test_scaling_and_permutation(self):
        """Scaling the outputs by c scales the spread by c; member order is irrelevant."""
        rng = np.random.default_rng(1)
        for _ in range(50):
            outputs = rng.normal(size=(int(rng.integers(2, 6)), 4))
            c = float(rng.uniform(0.0, 5.0))
            base = ensemble_variance(list(outputs), ensemble_mean(list(outputs))).item()
            scaled = ensemble_variance(list(c * outputs), ensemble_mean(list(c * outputs))).item()
            self.assertAlmostEqual(scaled, c * base, places=10)
            shuffled = list(rng.permutation(outputs))
            self.assertAlmostEqual(ensemble_variance(shuffled, ensemble_mean(shuffled)).item(), base, places=12)
            self.assertGreater(base, 0.0)

    def test_batched(self):
        """Batched outputs give one value per sample."""
        outputs = [np.array([[1.0, 0.0], [2.0, 2.0]]), np.array([[0.0, 1.0], [2.0, 2.0]])]
        np.testing.assert_allclose(ensemble_variance(outputs, ensemble_mean(outputs)).data, [math.sqrt(0.5), 0.0])

    def test_shape_mismatch(self):
        """A mean of the wrong shape is a dimension error."""
        with self.assertRaises(DimensionError):
            ensemble_variance([[1.0, 0.0], [0.0, 1.0]], [0.5, 0.5, 0.0])


class UncertaintyCurveTestCase(TestCase):
    """Dataset-mean spread per timestep."""

    def setUp(self):
        self.spec = tiny_spec()
        self.dataset = toy_dataset(np.random.default_rng(3), self.spec, 10, 4)
        self.tmp = tempfile.TemporaryDirectory()
        self.addCleanup(self.tmp.cleanup)

    def save(self, network: SpikingNetwork, name: str) -> Path:
        return checkpoint_save(network.spec, network.params, {"mode": network.mode}, Path(self.tmp.name) / name)

    def test_single_member_is_flat_zero(self):
        """One member has nothing to disagree with."""
        curve = uncertainty_curve(Ensemble([scaled_network(self.spec, 0)]), self.dataset, 4)
        np.testing.assert_array_equal(curve.sigma2, np.zeros(4))

    def test_duplicated_checkpoint(self):
        """The same checkpoint listed three times gives a zero curve."""
        path = self.save(scaled_network(self.spec, 1), "member.aois")
        ensemble = load_ensemble([path, path, path])
        curve = uncertainty_curve(ensemble, self.dataset, 4, keep_mu=True)
        np.testing.assert_allclose(curve.sigma2, 0.0, atol=1e-12)
        self.assertEqual(curve.mu.shape, (4, 10, 3))

    def test_independent_members(self):
        """Differently initialised members disagree somewhere and never go negative."""
        members = [scaled_network(self.spec, seed) for seed in (2, 3)]
        curve = uncertainty_curve(Ensemble(members), self.dataset, 4, batch_size=3)
        self.assertEqual(curve.sigma2.shape, (4,))
        self.assertTrue(np.all(curve.sigma2 >= 0.0))
        self.assertGreater(curve.avg_sigma2, 0.0)
        self.assertTrue(0.0 <= curve.final_accuracy <= 1.0)

    def test_incompatible_members(self):
        """Members must share spec and input mode."""
        other = scaled_network(tiny_spec(classes=4), 0)
        with self.assertRaises(CompatibilityError):
            Ensemble([scaled_network(self.spec, 0), other])
        with self.assertRaises(CompatibilityError):
            Ensemble([scaled_network(self.spec, 0), scaled_network(self.spec, 1, mode="frame")])
        with self.assertRaises(ContractError):
            Ensemble([])

    def test_frame(self):
        """Per-timestep rows followed by the summary row."""
        curve = UncertaintyCurve(sigma2=np.array([0.4, 0.2]), final_accuracy=0.75)
        frame = curve.to_frame()
        self.assertEqual(list(frame.columns), ["timestep", "sigma2", "final_accuracy"])
        self.assertEqual(frame["timestep"].tolist(), ["1", "2", "avg_sigma2"])
        self.assertAlmostEqual(frame["sigma2"].iloc[-1], 0.3)
        self.assertEqual(frame["final_accuracy"].iloc[-1], 0.75)
        self.assertTrue(np.isnan(frame["final_accuracy"].iloc[0]))
