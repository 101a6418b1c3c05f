import os
import sys
import unittest
from itertools import permutations

import numpy as np
from scipy.optimize import linear_sum_assignment

# Add the repository root to the path
sys.path.insert(0, os.path.join(os.path.dirname(__file__), '..'))
sys.path.insert(0, os.path.dirname(__file__))

from grad_utils import check_gradient
from utils import autodiff as ad
from utils.errors import ConfigError, LengthError, LossError, ShapeError
from utils.losses import MtlConfig, mtl_loss, pit_bf_loss, pit_from_matrix, snr_loss, vm_loss


class TestSnrLoss(unittest.TestCase):
    def test_zero_estimate(self):
        self.assertAlmostEqual(snr_loss(np.array([1.0, 2.0, 3.0]), np.zeros(3)).item(), 0.0, places=6)

    def test_orthogonal_unit_vectors(self):
        self.assertAlmostEqual(snr_loss(np.array([1.0, 0.0]), np.array([0.0, 1.0])).item(), 3.0103, places=4)

    def test_perfect_estimate_hits_floor(self):
        ref = np.random.default_rng(0).standard_normal(100)
        self.assertEqual(snr_loss(ref, ref.copy()).item(), -60.0)
        self.assertEqual(snr_loss(ref, ref.copy(), loss_floor_db=-30.0).item(), -30.0)

    def test_zero_reference(self):
        with self.assertRaises(LossError):
            snr_loss(np.zeros(4), np.ones(4))

    def test_length_mismatch(self):
        with self.assertRaises(LengthError):
            snr_loss(np.ones(4), np.ones(5))

    def test_vm_loss_gradient(self):
        rng = np.random.default_rng(1)
        v = rng.standard_normal((1, 50))
        v_hat = v + 0.3 * rng.standard_normal((1, 50))
        self.assertLess(check_gradient(lambda t: vm_loss(v, t), v_hat), 1e-4)

    def test_vm_loss_copy_baseline_is_finite(self):
        """A shifted copy of the target gives a finite loss above the floor."""
        v = np.sin(np.linspace(0, 40, 400))[None, :]
        copy = np.roll(v, 7, axis=1)
        loss = vm_loss(v, copy).item()
        self.assertTrue(np.isfinite(loss))
        self.assertGreater(loss, -60.0)


class TestPit(unittest.TestCase):
    def test_two_source_matrix(self):
        total, perm = pit_from_matrix([[-10.0, 0.0], [0.0, -10.0]])
        self.assertEqual(total, -20.0)
        self.assertEqual(perm, (0, 1))

    def test_ties_keep_lowest_permutation(self):
        self.assertEqual(pit_from_matrix(np.zeros((3, 3)))[1], (0, 1, 2))

    def test_matches_assignment_oracle(self):
        rng = np.random.default_rng(2)
        for sources in (1, 2, 3):
            for _ in range(1000):
                matrix = rng.normal(size=(sources, sources)) * 10
                rows, cols = linear_sum_assignment(matrix)
                total, perm = pit_from_matrix(matrix)
                self.assertAlmostEqual(total, matrix[rows, cols].sum())
                self.assertEqual(perm, tuple(cols))

    def test_non_square_matrix(self):
        with self.assertRaises(ShapeError):
            pit_from_matrix(np.zeros((2, 3)))

    def test_single_source_reduces_to_snr(self):
        rng = np.random.default_rng(3)
        x, est = rng.standard_normal((1, 30)), rng.standard_normal((1, 30))
        loss, perm = pit_bf_loss(x, est)
        self.assertEqual(perm, (0,))
        self.assertAlmostEqual(loss.item(), snr_loss(x[0], est[0]).item())

    def test_recovers_swapped_estimates(self):
        rng = np.random.default_rng(4)
        x = rng.standard_normal((3, 200))
        est = x[[1, 0, 2]] + 0.1 * rng.standard_normal((3, 200))
        loss, perm = pit_bf_loss(x, est)
        self.assertEqual(perm, (1, 0, 2))
        self.assertLess(loss.item(), -40.0)

    def test_bounded_by_identity_assignment(self):
        rng = np.random.default_rng(5)
        for _ in range(20):
            x, est = rng.standard_normal((3, 40)), rng.standard_normal((3, 40))
            identity = sum(snr_loss(x[i], est[i]).item() for i in range(3))
            self.assertLessEqual(pit_bf_loss(x, est)[0].item(), identity + 1e-12)

    def test_invariant_under_joint_permutation(self):
        rng = np.random.default_rng(6)
        x, est = rng.standard_normal((3, 40)), rng.standard_normal((3, 40))
        reference = pit_bf_loss(x, est)[0].item()
        for order in permutations(range(3)):
            order = list(order)
            self.assertAlmostEqual(pit_bf_loss(x[order], est[order])[0].item(), reference)

    def test_batch_mean(self):
        rng = np.random.default_rng(7)
        x, est = rng.standard_normal((2, 3, 40)), rng.standard_normal((2, 3, 40))
        loss, perms = pit_bf_loss(x, est)
        self.assertEqual(len(perms), 2)
        expected = (pit_bf_loss(x[0], est[0])[0].item() + pit_bf_loss(x[1], est[1])[0].item()) / 2
        self.assertAlmostEqual(loss.item(), expected)

    def test_gradient_flows_through_selected_branch(self):
        rng = np.random.default_rng(8)
        x = rng.standard_normal((2, 30))
        est = x[[1, 0]] + 0.5 * rng.standard_normal((2, 30))
        self.assertLess(check_gradient(lambda t: pit_bf_loss(x, t)[0], est), 1e-4)

    def test_mismatched_counts(self):
        with self.assertRaises(ShapeError):
            pit_bf_loss(np.ones((2, 10)), ad.DiffTensor(np.ones((3, 10))))


class TestMtlLoss(unittest.TestCase):
    def test_endpoints_return_single_task_nodes(self):
        l_vm, l_bf = ad.parameter(-10.0), ad.parameter(-6.0)
        self.assertIs(mtl_loss(MtlConfig(alpha=1.0), l_vm, l_bf), l_vm)
        self.assertIs(mtl_loss(MtlConfig(alpha=0.0), l_vm, l_bf), l_bf)

    def test_interpolation(self):
        loss = mtl_loss(MtlConfig(alpha=0.3), ad.as_tensor(-10.0), ad.as_tensor(-6.0))
        self.assertAlmostEqual(loss.item(), -7.2)

    def test_linear_in_alpha(self):
        values = [mtl_loss(a, ad.as_tensor(-10.0), ad.as_tensor(-6.0)).item() for a in (0.1, 0.4, 0.7)]
        self.assertAlmostEqual(values[1] - values[0], values[2] - values[1])

    def test_gradient_split(self):
        l_vm, l_bf = ad.parameter(-10.0), ad.parameter(-6.0)
        ad.backward(mtl_loss(MtlConfig(alpha=0.25), l_vm, l_bf))
        self.assertAlmostEqual(float(l_vm.grad), 0.25)
        self.assertAlmostEqual(float(l_bf.grad), 0.75)

    def test_alpha_out_of_range(self):
        with self.assertRaises(ConfigError):
            MtlConfig(alpha=1.5)
        with self.assertRaises(ConfigError):
            mtl_loss(-0.1, ad.as_tensor(0.0), ad.as_tensor(0.0))


if __name__ == '__main__':
    unittest.main()
