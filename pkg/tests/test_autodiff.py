import gc
import unittest
import sys
import os
import weakref

import numpy as np

# Add the repository root to the path
sys.path.insert(0, os.path.join(os.path.dirname(__file__), '..'))
sys.path.insert(0, os.path.dirname(__file__))

from grad_utils import check_gradient
from utils import autodiff as ad
from utils.autodiff import ComplexTensor
from utils.errors import ShapeError

TOLERANCE = 1e-4


class TestDiffTensorBasics(unittest.TestCase):
    def test_square_gradient(self):
        """d(x*x)/dx at 3 is 6."""
        x = ad.parameter(3.0)
        ad.backward(x * x)
        self.assertAlmostEqual(float(x.grad), 6.0)

    def test_backward_requires_scalar(self):
        """A non-scalar loss is rejected."""
        x = ad.parameter(np.ones(3))
        with self.assertRaises(ShapeError):
            ad.backward(x * 2.0)

    def test_gradient_accumulates_over_reuse(self):
        """A leaf used twice collects both contributions."""
        x = ad.parameter(2.0)
        ad.backward(x * 3.0 + x * x)
        self.assertAlmostEqual(float(x.grad), 3.0 + 4.0)

    def test_constants_do_not_collect_gradients(self):
        x = ad.parameter(np.ones(2))
        c = ad.DiffTensor(np.array([1.0, 2.0]))
        ad.backward((x * c).sum())
        self.assertIsNone(c.grad)
        np.testing.assert_array_equal(x.grad, [1.0, 2.0])

    def test_ndarray_on_the_left(self):
        """numpy arrays defer to DiffTensor operators."""
        x = ad.parameter(np.ones(3))
        y = np.array([1.0, 2.0, 3.0]) * x
        self.assertIsInstance(y, ad.DiffTensor)

    def test_graph_released_after_backward(self):
        """Intermediate nodes are freed once backward returns."""
        x = ad.parameter(np.random.default_rng(0).standard_normal(8))
        hidden = ad.exp(x) * 2.0
        ref = weakref.ref(hidden)
        loss = hidden.sum()
        del hidden
        ad.backward(loss)
        del loss
        gc.collect()
        self.assertIsNone(ref())
        self.assertEqual(x.grad.shape, (8,))

    def test_no_growth_across_steps(self):
        """Repeated steps do not keep graphs alive."""
        x = ad.parameter(np.ones((4, 4)))
        refs = []
        for _ in range(5):
            y = ad.matmul(x, x)
            refs.append(weakref.ref(y))
            loss = (y * y).sum()
            del y
            ad.backward(loss)
            del loss
            x.zero_grad()
        gc.collect()
        self.assertTrue(all(p() is None for p in refs))


class TestElementwiseGradients(unittest.TestCase):
    def setUp(self):
        """Random positive test point."""
        self.value = np.random.default_rng(1).uniform(0.5, 2.0, size=(3, 4))

    def test_arithmetic(self):
        other = np.random.default_rng(2).uniform(0.5, 2.0, size=(4,))
        for build in (lambda x: (x + other).sum(), lambda x: (x - other * x).sum(),
                      lambda x: (x / other).sum(), lambda x: (other / x).sum(),
                      lambda x: (-x * x).sum(), lambda x: (x ** 3).sum()):
            self.assertLess(check_gradient(build, self.value), TOLERANCE)

    def test_unary(self):
        for fn in (ad.exp, ad.log, ad.sqrt, ad.sigmoid):
            self.assertLess(check_gradient(lambda x: (fn(x) * fn(x)).sum(), self.value), TOLERANCE)

    def test_relu_and_clamp(self):
        value = self.value - 1.25  # entries on both sides of zero, away from the kink
        value[np.abs(value) < 0.05] = 0.3
        self.assertLess(check_gradient(lambda x: (ad.relu(x) * x).sum(), value), TOLERANCE)
        self.assertLess(check_gradient(lambda x: (ad.clamp_min(x, 0.0) ** 2).sum(), value), TOLERANCE)

    def test_broadcasting(self):
        row = np.random.default_rng(3).standard_normal((1, 4))
        self.assertLess(check_gradient(lambda x: ((x + row) * (x * row)).sum(), self.value), TOLERANCE)
        self.assertLess(check_gradient(lambda x: (ad.DiffTensor(self.value) * x).sum(), row), TOLERANCE)


class TestShapeGradients(unittest.TestCase):
    def setUp(self):
        self.value = np.random.default_rng(4).standard_normal((2, 3, 4))
        self.weights = np.random.default_rng(5).standard_normal((2, 3, 4))

    def weighted(self, y):
        return (y * self.weights.reshape(y.shape) if y.size == self.weights.size else y * y).sum()

    def test_reductions(self):
        self.assertLess(check_gradient(lambda x: (x.sum(axis=1) ** 2).sum(), self.value), TOLERANCE)
        self.assertLess(check_gradient(lambda x: (x.mean(axis=(0, 2), keepdims=True) ** 2).sum(), self.value),
                        TOLERANCE)

    def test_reshape_transpose_swapaxes(self):
        self.assertLess(check_gradient(lambda x: self.weighted(x.reshape(6, 4)), self.value), TOLERANCE)
        self.assertLess(check_gradient(lambda x: (x.transpose(2, 0, 1) ** 2 * 0.5).sum()
                                       + (x.swapaxes(0, 2) ** 3).sum(), self.value), TOLERANCE)

    def test_getitem(self):
        self.assertLess(check_gradient(lambda x: (x[:, 1:, ::2] ** 2).sum(), self.value), TOLERANCE)
        index = np.array([0, 2, 2])
        self.assertLess(check_gradient(lambda x: (x[:, index] ** 2).sum(), self.value), TOLERANCE)

    def test_concatenate_stack_pad(self):
        other = ad.DiffTensor(np.ones((2, 3, 4)))
        self.assertLess(check_gradient(lambda x: (ad.concatenate([x, other * x], axis=1) ** 2).sum(),
                                       self.value), TOLERANCE)
        self.assertLess(check_gradient(lambda x: (ad.stack([x, x * x], axis=0) ** 2).sum(), self.value),
                        TOLERANCE)
        self.assertLess(check_gradient(lambda x: (ad.pad(x, ((0, 0), (1, 2), (3, 0))) ** 2).sum(), self.value),
                        TOLERANCE)


class TestLinearAlgebraGradients(unittest.TestCase):
    def test_matmul(self):
        rng = np.random.default_rng(6)
        b = rng.standard_normal((4, 2))
        self.assertLess(check_gradient(lambda x: (ad.matmul(x, b) ** 2).sum(), rng.standard_normal((3, 4))),
                        TOLERANCE)

    def test_matmul_requires_matrices(self):
        with self.assertRaises(ShapeError):
            ad.matmul(ad.DiffTensor(np.ones(3)), ad.DiffTensor(np.ones((3, 1))))

    def test_inverse(self):
        value = np.array([[2.0, 0.3], [0.1, 1.5]])
        self.assertLess(check_gradient(lambda x: (ad.inv(x) ** 2).sum(), value), TOLERANCE)

    def test_complex_inverse(self):
        """Gradient through a complex 2x2 inverse matches central differences."""
        rng = np.random.default_rng(7)
        real = rng.standard_normal((2, 2)) + 3.0 * np.eye(2)
        imag = rng.standard_normal((2, 2))

        def build(x):
            inverse = ad.complex_inv(ComplexTensor(x, ad.DiffTensor(imag)))
            return (inverse.abs2() * np.array([[1.0, 2.0], [3.0, 4.0]])).sum()

        self.assertLess(check_gradient(build, real), TOLERANCE)

        def build_imag(y):
            inverse = ad.complex_inv(ComplexTensor(ad.DiffTensor(real), y))
            return (inverse.re * inverse.im).sum()

        self.assertLess(check_gradient(build_imag, imag), TOLERANCE)

    def test_complex_inverse_value(self):
        a = np.array([[2.0 + 1.0j, 0.5j], [0.3, 1.0 - 0.5j]])
        inverse = ad.complex_inv(ComplexTensor.from_numpy(a)).numpy()
        np.testing.assert_allclose(inverse, np.linalg.inv(a), atol=1e-12)

    def test_complex_arithmetic_matches_numpy(self):
        rng = np.random.default_rng(8)
        a = rng.standard_normal((2, 2)) + 1j * rng.standard_normal((2, 2))
        b = rng.standard_normal((2, 2)) + 1j * rng.standard_normal((2, 2))
        ta, tb = ComplexTensor.from_numpy(a), ComplexTensor.from_numpy(b)
        np.testing.assert_allclose((ta * tb).numpy(), a * b, atol=1e-12)
        np.testing.assert_allclose((ta / tb).numpy(), a / b, atol=1e-12)
        np.testing.assert_allclose((ta @ tb).numpy(), a @ b, atol=1e-12)
        np.testing.assert_allclose(ta.hermitian().numpy(), a.conj().T, atol=0)
        self.assertAlmostEqual(complex(ta.trace().numpy()), complex(np.trace(a)))


class TestSignalGradients(unittest.TestCase):
    def setUp(self):
        self.rng = np.random.default_rng(9)

    def test_conv1d(self):
        x = self.rng.standard_normal((2, 3, 10))
        w = self.rng.standard_normal((4, 3, 3))
        for kwargs in ({}, {'stride': 2}, {'dilation': 2, 'padding': (2, 2)}):
            self.assertLess(check_gradient(lambda v: (ad.conv1d(v, ad.DiffTensor(w), **kwargs) ** 2).sum(), x),
                            TOLERANCE)
            self.assertLess(check_gradient(lambda v: (ad.conv1d(ad.DiffTensor(x), v, **kwargs) ** 2).sum(), w),
                            TOLERANCE)

    def test_depthwise_conv1d(self):
        x = self.rng.standard_normal((1, 3, 9))
        w = self.rng.standard_normal((3, 1, 3))
        build = lambda v: (ad.conv1d(v, ad.DiffTensor(w), dilation=2, padding=(2, 2), groups=3) ** 2).sum()
        self.assertLess(check_gradient(build, x), TOLERANCE)
        build_w = lambda v: (ad.conv1d(ad.DiffTensor(x), v, dilation=2, padding=(2, 2), groups=3) ** 2).sum()
        self.assertLess(check_gradient(build_w, w), TOLERANCE)

    def test_conv1d_matches_numpy_correlation(self):
        x = self.rng.standard_normal(12)
        w = self.rng.standard_normal(4)
        out = ad.conv1d(ad.DiffTensor(x.reshape(1, 1, -1)), ad.DiffTensor(w.reshape(1, 1, -1))).data[0, 0]
        np.testing.assert_allclose(out, np.correlate(x, w, mode='valid'), atol=1e-12)

    def test_conv_transpose1d(self):
        x = self.rng.standard_normal((2, 3, 5))
        w = self.rng.standard_normal((3, 2, 4))
        self.assertLess(check_gradient(lambda v: (ad.conv_transpose1d(v, ad.DiffTensor(w), 2) ** 2).sum(), x),
                        TOLERANCE)
        self.assertLess(check_gradient(lambda v: (ad.conv_transpose1d(ad.DiffTensor(x), v, 2) ** 2).sum(), w),
                        TOLERANCE)

    def test_frame_and_overlap_add(self):
        x = self.rng.standard_normal((2, 20))
        self.assertLess(check_gradient(lambda v: (ad.frame(v, 8, 4) ** 2 * np.arange(8)).sum(), x), TOLERANCE)
        frames = self.rng.standard_normal((3, 8))
        self.assertLess(check_gradient(lambda v: (ad.overlap_add(v, 4) ** 2).sum(), frames), TOLERANCE)

    def test_rfft(self):
        for n in (8, 9):
            x = self.rng.standard_normal((2, n))
            weights = self.rng.standard_normal(n // 2 + 1)
            build = lambda v: ((ad.rfft(v).abs2() * weights).sum() + (ad.rfft(v).re * weights).sum())
            self.assertLess(check_gradient(build, x), TOLERANCE)

    def test_irfft(self):
        n = 8
        spectrum = np.fft.rfft(self.rng.standard_normal((2, n)))
        target = self.rng.standard_normal((2, n))
        build_re = lambda v: ((ad.irfft(ComplexTensor(v, ad.DiffTensor(spectrum.imag)), n) - target) ** 2).sum()
        build_im = lambda v: ((ad.irfft(ComplexTensor(ad.DiffTensor(spectrum.real), v), n) - target) ** 2).sum()
        self.assertLess(check_gradient(build_re, spectrum.real), TOLERANCE)
        # only the interior bins are free imaginary parts of a real signal
        self.assertLess(check_gradient(build_im, spectrum.imag, indices=[1, 2, 3, 6, 7, 8]), TOLERANCE)

    def test_rfft_irfft_values(self):
        x = self.rng.standard_normal((3, 16))
        spectrum = ad.rfft(ad.DiffTensor(x))
        np.testing.assert_allclose(spectrum.numpy(), np.fft.rfft(x), atol=1e-12)
        np.testing.assert_allclose(ad.irfft(spectrum, 16).data, x, atol=1e-12)


if __name__ == '__main__':
    unittest.main()
