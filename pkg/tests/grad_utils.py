"""
Central finite-difference helpers shared by the gradient tests.
"""

import os
import sys

import numpy as np

sys.path.insert(0, os.path.join(os.path.dirname(__file__), '..'))

from utils import autodiff as ad


def numeric_grad(fn, value, step=1e-6, indices=None):
    """
    Central differences of the scalar fn(array) at ``value``.

    Args:
        fn: callable taking an ndarray and returning a float
        value: point of evaluation
        indices: optional flat indices to differentiate (all entries otherwise)

    Returns:
        np.ndarray: gradient estimate, zero outside the selected entries
    """
    value = np.array(value, dtype=np.float64)
    grad = np.zeros_like(value)
    flat = value.reshape(-1)
    out = grad.reshape(-1)
    for i in (range(flat.size) if indices is None else indices):
        original = flat[i]
        flat[i] = original + step
        plus = fn(value)
        flat[i] = original - step
        minus = fn(value)
        flat[i] = original
        out[i] = (plus - minus) / (2.0 * step)
    return grad


def analytic_grad(build, value):
    """Gradient of the scalar DiffTensor build(x) with respect to the leaf x."""
    x = ad.parameter(value)
    loss = build(x)
    ad.backward(loss)
    return x.grad if x.grad is not None else np.zeros_like(x.data)


def relative_error(a, b):
    a, b = np.asarray(a), np.asarray(b)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), 1e-12))


def check_gradient(build, value, step=1e-6, indices=None):
    """Relative error between the reverse-mode and the finite-difference gradient of build at value."""
    analytic = analytic_grad(build, value)
    numeric = numeric_grad(lambda v: build(ad.DiffTensor(v)).item(), value, step, indices)
    if indices is not None:
        mask = np.zeros(np.size(value), dtype=bool)
        mask[list(indices)] = True
        analytic = np.where(mask.reshape(np.shape(value)), analytic, 0.0)
    return relative_error(analytic, numeric)
