#!/usr/bin/env python3
"""
Adam optimizer and global-norm gradient clipping for dicts of DiffTensor
parameters.
"""

import logging
from dataclasses import dataclass, field

import numpy as np

from utils.errors import ConfigError, TrainingError

logger = logging.getLogger(__name__)


@dataclass
class OptimizerState:
    """Adam hyperparameters, step counter and per-parameter moment estimates"""

    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    clip_threshold: float = 5.0
    step: int = 0
    first_moment: dict = field(default_factory=dict)
    second_moment: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ConfigError(f"learning rate must be positive, got {self.learning_rate}")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError(f"Adam betas must be in [0, 1), got {self.beta1}, {self.beta2}")
        if self.clip_threshold <= 0:
            raise ConfigError(f"clip threshold must be positive, got {self.clip_threshold}")
        if self.step < 0:
            raise ConfigError(f"step count must be non-negative, got {self.step}")

    def hyperparameters(self):
        return {'learning_rate': self.learning_rate, 'beta1': self.beta1, 'beta2': self.beta2,
                'eps': self.eps, 'clip_threshold': self.clip_threshold, 'step': self.step}


def global_norm(grads):
    return float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))


def clip_global_norm(grads, threshold):
    """
    Scale all gradients by threshold / norm when their joint L2 norm exceeds threshold.

    Args:
        grads: dict name -> ndarray
        threshold: positive float

    Returns:
        dict: clipped gradients (the input dict when no clipping applies)
    """
    if threshold <= 0:
        raise ConfigError(f"clip threshold must be positive, got {threshold}")
    norm = global_norm(grads)
    if norm <= threshold:
        return grads
    scale = threshold / norm
    return {name: g * scale for name, g in grads.items()}


def _check_finite(grads, step):
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            bad = int(np.size(g) - np.count_nonzero(np.isfinite(g)))
            raise TrainingError(f"non-finite gradient for parameter '{name}' ({bad} entries) at step {step}")


def adam_step(state, params, grads):
    """
    Apply one Adam update.

    Args:
        state: OptimizerState, updated in place
        params: dict name -> DiffTensor, data rebound in place
        grads: dict name -> ndarray; missing names count as zero gradient

    Returns:
        tuple: (params, state)
    """
    _check_finite(grads, state.step + 1)
    state.step += 1
    correction1 = 1.0 - state.beta1 ** state.step
    correction2 = 1.0 - state.beta2 ** state.step
    for name, param in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(param.data)
        m = state.first_moment.get(name, np.zeros_like(param.data))
        v = state.second_moment.get(name, np.zeros_like(param.data))
        if m.shape != param.data.shape:
            raise TrainingError(f"moment shape {m.shape} does not match parameter '{name}' {param.data.shape}")
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * v + (1.0 - state.beta2) * g * g
        state.first_moment[name] = m
        state.second_moment[name] = v
        param.data = param.data - state.learning_rate * (m / correction1) / (np.sqrt(v / correction2) + state.eps)
    return params, state


def apply_gradients(state, params):
    """
    Clip the accumulated ``grad`` of every parameter and take an Adam step.

    Returns:
        float: global gradient norm before clipping
    """
    grads = {name: p.grad if p.grad is not None else np.zeros_like(p.data) for name, p in params.items()}
    norm = global_norm(grads)
    _check_finite(grads, state.step + 1)
    adam_step(state, params, clip_global_norm(grads, state.clip_threshold))
    return norm
