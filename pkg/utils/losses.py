#!/usr/bin/env python3
"""
Training objectives: the SNR loss on the virtual channel, the permutation
invariant SNR loss on the beamformed sources and their multi-task mix.
"""

import logging
from dataclasses import dataclass
from itertools import permutations

import numpy as np

from utils import autodiff as ad
from utils.errors import ConfigError, LengthError, LossError, ShapeError

logger = logging.getLogger(__name__)

DB_PER_NEPER = 10.0 / np.log(10.0)


@dataclass(frozen=True)
class MtlConfig:
    """Weight alpha of the VM-level loss and numerical guards of the SNR loss"""

    alpha: float = 0.5
    snr_epsilon: float = 1e-8
    loss_floor_db: float = -60.0

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError(f"alpha must lie in [0, 1], got {self.alpha}")
        if self.snr_epsilon <= 0:
            raise ConfigError(f"snr_epsilon must be positive, got {self.snr_epsilon}")


def snr_loss(ref, est, snr_epsilon=1e-8, loss_floor_db=-60.0):
    """
    -10 log10(||ref||^2 / (||ref - est||^2 + eps)), floored at loss_floor_db.

    Args:
        ref: reference waveform (array or DiffTensor)
        est: estimate with the same shape

    Returns:
        DiffTensor scalar in dB, lower is better
    """
    ref, est = ad.as_tensor(ref), ad.as_tensor(est)
    if ref.shape != est.shape:
        raise LengthError(f"reference {ref.shape} and estimate {est.shape} differ in length")
    ref_energy = (ref * ref).sum()
    if ref_energy.item() <= 0:
        raise LossError("SNR loss is undefined for an all-zero reference")
    residual = ref - est
    residual_energy = (residual * residual).sum()
    loss = (ad.log(residual_energy + snr_epsilon) - ad.log(ref_energy)) * DB_PER_NEPER
    return ad.clamp_min(loss, loss_floor_db)


def vm_loss(v, v_hat, snr_epsilon=1e-8, loss_floor_db=-60.0):
    """SNR loss summed over the virtual channels, v and v_hat are [C_v, T]."""
    v, v_hat = ad.as_tensor(v), ad.as_tensor(v_hat)
    if v.ndim == 1:
        return snr_loss(v, v_hat, snr_epsilon, loss_floor_db)
    if v.shape[0] != v_hat.shape[0]:
        raise ShapeError(f"{v.shape[0]} target channels but {v_hat.shape[0]} estimates")
    total = snr_loss(v[0], v_hat[0], snr_epsilon, loss_floor_db)
    for c in range(1, v.shape[0]):
        total = total + snr_loss(v[c], v_hat[c], snr_epsilon, loss_floor_db)
    return total


def pit_from_matrix(pairwise):
    """
    Minimum over permutations of sum_i pairwise[i, p[i]].

    Permutations are visited in lexicographic order and only a strictly
    smaller total replaces the incumbent, so ties keep the lowest one.

    Returns:
        tuple: (minimum total, permutation tuple)
    """
    pairwise = np.asarray(pairwise, dtype=np.float64)
    if pairwise.ndim != 2 or pairwise.shape[0] != pairwise.shape[1]:
        raise ShapeError(f"pairwise loss matrix must be square, got {pairwise.shape}")
    rows = np.arange(pairwise.shape[0])
    best, best_perm = np.inf, None
    for perm in permutations(range(pairwise.shape[0])):
        total = float(pairwise[rows, list(perm)].sum())
        if total < best:
            best, best_perm = total, perm
    return best, best_perm


def pit_bf_loss(x, x_hat, snr_epsilon=1e-8, loss_floor_db=-60.0):
    """
    Permutation invariant SNR loss between references and beamformed estimates.

    Args:
        x: references [I, T] (or [batch, I, T])
        x_hat: estimates, same shape, DiffTensor

    Returns:
        tuple: (DiffTensor loss summed over sources and averaged over the
        batch, permutation or list of permutations; estimate p[i] is
        matched with reference i)
    """
    x, x_hat = ad.as_tensor(x), ad.as_tensor(x_hat)
    if x.ndim == 3:
        if x_hat.ndim != 3 or x_hat.shape[0] != x.shape[0]:
            raise ShapeError(f"batch of references {x.shape} does not match estimates {x_hat.shape}")
        losses, perms = [], []
        for b in range(x.shape[0]):
            loss, perm = pit_bf_loss(x[b], x_hat[b], snr_epsilon, loss_floor_db)
            losses.append(loss)
            perms.append(perm)
        total = losses[0]
        for loss in losses[1:]:
            total = total + loss
        return total * (1.0 / len(losses)), perms

    if x.ndim != 2 or x_hat.ndim != 2 or x.shape[0] != x_hat.shape[0]:
        raise ShapeError(f"need equal numbers of references and estimates, got {x.shape} and {x_hat.shape}")
    if x.shape[1] != x_hat.shape[1]:
        raise LengthError(f"references have {x.shape[1]} samples, estimates {x_hat.shape[1]}")
    sources = x.shape[0]
    pairs = [[snr_loss(x[i], x_hat[j], snr_epsilon, loss_floor_db) for j in range(sources)] for i in range(sources)]
    matrix = np.array([[pairs[i][j].item() for j in range(sources)] for i in range(sources)])
    _, perm = pit_from_matrix(matrix)
    total = pairs[0][perm[0]]
    for i in range(1, sources):
        total = total + pairs[i][perm[i]]
    return total, perm


def mtl_loss(cfg, l_vm, l_bf):
    """
    alpha * l_vm + (1 - alpha) * l_bf.

    At alpha = 1 (0) the VM (BF) loss node itself is returned, so the
    other term never enters the graph.
    """
    if not isinstance(cfg, MtlConfig):
        cfg = MtlConfig(alpha=float(cfg))
    if cfg.alpha == 1.0:
        return l_vm
    if cfg.alpha == 0.0:
        return l_bf
    return l_vm * cfg.alpha + l_bf * (1.0 - cfg.alpha)
