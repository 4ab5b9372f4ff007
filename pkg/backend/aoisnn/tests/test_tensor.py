"""
Tests for the autodiff tape and its primitives.
"""

import math
import threading
from unittest import TestCase

import numpy as np

from .. import tensor as tn
from ..exceptions import ContractError, DimensionError, NumericError, RangeError
from ..gradcheck import finite_difference_check
from ..network import SpikingNetwork, network_forward
from ..objective import loss_tet
from ..tensor import Tape, Tensor, backward, parameter, zero_grad
from .helpers import random_events, tiny_spec


class PrimitiveTestCase(TestCase):
    """Forward values of the primitives."""

    def test_matmul(self):
        """Identity, scalar and zero products."""
        np.testing.assert_array_equal(tn.matmul([[1, 2], [3, 4]], [[1, 0], [0, 1]]).data, [[1, 2], [3, 4]])
        np.testing.assert_array_equal(tn.matmul([[1, 2]], [[3], [4]]).data, [[11]])
        np.testing.assert_array_equal(tn.matmul([[0, 0]], [[5], [7]]).data, [[0]])

    def test_matmul_mismatch_names_shapes(self):
        """Misaligned operands raise a dimension error naming both shapes."""
        with self.assertRaises(DimensionError) as ctx:
            tn.matmul(np.ones((2, 3)), np.ones((2, 3)))
        self.assertIn("(2, 3)", str(ctx.exception))

    def test_conv2d(self):
        """Summed windows, zero kernels and output extent."""
        out = tn.conv2d(np.ones((1, 4, 4)), np.ones((1, 1, 2, 2)), stride=2)
        np.testing.assert_array_equal(out.data, np.full((1, 2, 2), 4.0))
        rng = np.random.default_rng(0)
        zero = tn.conv2d(rng.normal(size=(2, 5, 5)), np.zeros((3, 2, 3, 3)), stride=1, padding=1)
        np.testing.assert_array_equal(zero.data, np.zeros((3, 5, 5)))
        shaped = tn.conv2d(np.ones((1, 8, 8)), np.ones((1, 1, 8, 8)), stride=4, padding=2)
        self.assertEqual(shaped.shape, (1, 2, 2))

    def test_conv2d_matches_direct_sum(self):
        """Strided, padded batched convolution agrees with explicit loops."""
        rng = np.random.default_rng(1)
        x = rng.normal(size=(2, 3, 6, 5))
        w = rng.normal(size=(4, 3, 3, 3))
        out = tn.conv2d(x, w, stride=2, padding=1).data
        xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
        for n in range(2):
            for o in range(4):
                for i in range(out.shape[2]):
                    for j in range(out.shape[3]):
                        expected = np.sum(xp[n, :, 2 * i:2 * i + 3, 2 * j:2 * j + 3] * w[o])
                        self.assertAlmostEqual(out[n, o, i, j], expected, places=10)

    def test_conv2d_rejects_large_kernel(self):
        """A kernel larger than the padded input is a dimension error."""
        with self.assertRaises(DimensionError):
            tn.conv2d(np.ones((1, 2, 2)), np.ones((1, 1, 3, 3)))

    def test_softmax(self):
        """Symmetric, closed-form and saturated cases."""
        np.testing.assert_allclose(tn.softmax([0.0, 0.0]).data, [0.5, 0.5])
        np.testing.assert_allclose(tn.softmax([math.log(3), 0.0]).data, [0.75, 0.25])
        big = tn.softmax([1000.0, 0.0]).data
        self.assertTrue(np.all(np.isfinite(big)))
        self.assertAlmostEqual(big[0], 1.0)

    def test_softmax_nan(self):
        """NaN logits are a numeric error."""
        with self.assertRaises(NumericError):
            tn.softmax([float("nan"), 0.0])

    def test_cross_entropy(self):
        """Closed forms and label range."""
        self.assertAlmostEqual(tn.cross_entropy([0.0, 0.0], 0).item(), 0.693147, places=6)
        self.assertAlmostEqual(tn.cross_entropy([math.log(3), 0.0], 0).item(), 0.287682, places=6)
        self.assertAlmostEqual(tn.cross_entropy([50.0, 0.0], 0).item(), 0.0, places=12)
        with self.assertRaises(RangeError):
            tn.cross_entropy([0.0, 0.0], 2)

    def test_l2_norm(self):
        """Pythagorean, zero and unit-entry vectors."""
        self.assertEqual(tn.l2_norm([3.0, 4.0]).item(), 5.0)
        self.assertEqual(tn.l2_norm([0.0, 0.0, 0.0]).item(), 0.0)
        self.assertAlmostEqual(tn.l2_norm([1.0, 0.0, 1.0, 0.0]).item(), math.sqrt(2))
        with self.assertRaises(ContractError):
            tn.l2_norm([1.0], epsilon=-1.0)

    def test_avg_pool(self):
        """Window means; incomplete trailing windows are dropped."""
        x = np.arange(25, dtype=float).reshape(1, 5, 5)
        out = tn.avg_pool2d(x, 2).data
        np.testing.assert_allclose(out[0], [[3.0, 5.0], [13.0, 15.0]])


class BackwardTestCase(TestCase):
    """Reverse sweep over the tape."""

    def test_sum_gradient(self):
        """Gradient of a sum is all ones."""
        w = parameter(np.array([1.0, -2.0, 3.0]))
        with Tape() as tape:
            root = tn.sum(w)
        backward(tape, root)
        np.testing.assert_array_equal(w.grad, np.ones(3))

    def test_quadratic_gradient(self):
        """(w.w)/2 at [1, 2] has gradient [1, 2]."""
        w = parameter(np.array([1.0, 2.0]))
        with Tape() as tape:
            root = tn.mul(tn.sum(tn.mul(w, w)), 0.5)
        backward(tape, root)
        np.testing.assert_allclose(w.grad, [1.0, 2.0])

    def test_cross_entropy_gradient(self):
        """Softmax-CE gradient is p minus one-hot."""
        logits = parameter(np.array([0.0, 0.0]))
        with Tape() as tape:
            root = tn.cross_entropy(logits, 0)
        backward(tape, root)
        np.testing.assert_allclose(logits.grad, [-0.5, 0.5])

    def test_gradients_accumulate_until_zeroed(self):
        """Two backward passes add up; zero_grad clears them."""
        w = parameter(np.array([2.0]))
        for _ in range(2):
            with Tape() as tape:
                root = tn.sum(tn.mul(w, 3.0))
            backward(tape, root)
        np.testing.assert_array_equal(w.grad, [6.0])
        zero_grad([w])
        np.testing.assert_array_equal(w.grad, [0.0])

    def test_unused_parameter_untouched(self):
        """Parameters outside the graph keep their gradient."""
        w, unused = parameter([1.0]), parameter([1.0])
        with Tape() as tape:
            root = tn.sum(w)
        backward(tape, root)
        self.assertIsNone(unused.grad)

    def test_non_scalar_root(self):
        """backward needs a scalar recorded on the same tape."""
        w = parameter(np.ones(3))
        with Tape() as tape:
            vector = tn.mul(w, 2.0)
        with self.assertRaises(ContractError):
            backward(tape, vector)
        with self.assertRaises(ContractError):
            backward(Tape(), tn.sum(Tensor([1.0])))

    def test_no_recording_without_tape(self):
        """Outside a tape operations leave no trace."""
        w = parameter([1.0, 2.0])
        out = tn.sum(tn.mul(w, w))
        self.assertIsNone(out._node)

    def test_min_max_route_gradient(self):
        """min and max send the gradient to the first extreme entry."""
        w = parameter(np.array([0.3, 0.1, 0.1, 0.9]))
        with Tape() as tape:
            root = tn.sub(tn.max(w), tn.min(w))
        backward(tape, root)
        np.testing.assert_array_equal(w.grad, [0.0, -1.0, 0.0, 1.0])

    def test_stop_gradient(self):
        """stop_gradient blocks the path."""
        w = parameter(np.array([1.0, 2.0]))
        with Tape() as tape:
            root = tn.sum(tn.mul(tn.stop_gradient(w), w))
        backward(tape, root)
        np.testing.assert_array_equal(w.grad, [1.0, 2.0])

    def test_tapes_are_thread_local(self):
        """A tape opened on another thread does not record this thread's ops."""
        w = parameter([1.0])
        opened = threading.Event()
        release = threading.Event()

        def hold_tape():
            with Tape():
                opened.set()
                release.wait(5)

        worker = threading.Thread(target=hold_tape)
        worker.start()
        opened.wait(5)
        out = tn.mul(w, 2.0)
        release.set()
        worker.join()
        self.assertIsNone(out._node)


class GradientCheckTestCase(TestCase):
    """Analytic gradients against central differences."""

    def test_quadratic(self):
        """A polynomial objective agrees to 1e-8."""
        w = parameter(np.array([0.5, -1.5, 2.0]))
        error = finite_difference_check(lambda p: tn.sum(tn.mul(tn.mul(p, p), 3.0)), w)
        self.assertLessEqual(error, 1e-8)

    def test_constant(self):
        """A constant objective has zero error."""
        w = parameter(np.array([1.0, 2.0]))
        self.assertEqual(finite_difference_check(lambda p: Tensor(4.0), w), 0.0)

    def test_bad_step(self):
        """The step must be positive."""
        with self.assertRaises(ContractError):
            finite_difference_check(lambda p: tn.sum(p), parameter([1.0]), h=0.0)

    def test_primitives(self):
        """conv2d, avg_pool2d, matmul, division, l2_norm and cross entropy."""
        rng = np.random.default_rng(3)
        x = parameter(rng.normal(size=(2, 2, 5, 5)))
        w = parameter(rng.normal(size=(3, 2, 3, 3)))
        d = parameter(rng.normal(size=(12, 4)))

        def objective(params):
            xs, ws, ds = params
            fmap = tn.avg_pool2d(tn.conv2d(xs, ws, stride=1, padding=1), 2)
            flat = tn.reshape(fmap, (2, -1))
            logits = tn.matmul(flat, ds)
            scaled = tn.div(logits, tn.l2_norm(logits, 1e-3))
            return tn.cross_entropy(scaled, np.array([1, 3]))

        self.assertLessEqual(finite_difference_check(objective, [x, w, d]), 1e-5)

    def test_smoothed_network(self):
        """The smoothed LIF network agrees within 1e-4 on five seeds."""
        spec = tiny_spec()
        for seed in range(5):
            rng = np.random.default_rng(seed)
            network = SpikingNetwork(spec, seed=seed)
            for name, p in network.params.items():
                if name.endswith(".weight"):
                    p.data *= 2.0
                else:
                    # keep membrane potentials off the kinks of the clamped firing function
                    p.data[...] = rng.uniform(-0.3, 0.3, size=p.shape)
            inputs = random_events(rng, spec, batch=2, T=5)
            labels = rng.integers(0, spec.num_classes, size=2)
            params = network.parameters()
            self.assertLessEqual(sum(p.size for p in params), 2000)

            def objective(_):
                record = network_forward(network, inputs, 5, smooth=True, keep_spikes=False)
                return loss_tet(record.outputs, labels)

            error = finite_difference_check(objective, params, h=1e-5)
            self.assertLessEqual(error, 1e-4, f"seed {seed}")
