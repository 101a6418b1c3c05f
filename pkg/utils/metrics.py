#!/usr/bin/env python3
"""
Evaluation metrics: projection-based SDR for the virtual channel and for
the beamformed sources, with SIR-based permutation resolution.
"""

import logging
from itertools import permutations

import numpy as np

from utils.errors import LengthError, MetricError, ShapeError

logger = logging.getLogger(__name__)

CLAMP_DB = 60.0


def _clamped_ratio_db(numerator, denominator):
    # a silent target (e.g. an all-zero estimate) is orthogonal to the reference
    if numerator <= 0:
        return -CLAMP_DB
    if denominator <= 0:
        return CLAMP_DB
    return float(np.clip(10.0 * np.log10(numerator / denominator), -CLAMP_DB, CLAMP_DB))


def _flat_pair(ref, est):
    ref = np.asarray(ref, dtype=np.float64).reshape(-1)
    est = np.asarray(est, dtype=np.float64).reshape(-1)
    if ref.shape != est.shape:
        raise LengthError(f"reference has {ref.size} samples, estimate {est.size}")
    return ref, est


def sdr(ref, est):
    """
    Signal-to-distortion ratio after projecting the estimate onto the reference.

    Args:
        ref, est: waveforms of equal length

    Returns:
        float: 10 log10(||z_tgt||^2 / ||z_tgt - est||^2) in dB, clamped to +-60
    """
    ref, est = _flat_pair(ref, est)
    ref_energy = float(ref @ ref)
    if ref_energy <= 0:
        raise MetricError("SDR is undefined for an all-zero reference")
    target = (float(est @ ref) / ref_energy) * ref
    distortion = target - est
    return _clamped_ratio_db(float(target @ target), float(distortion @ distortion))


def sdr_vm(v, v_hat):
    """SDR of the virtual microphone estimate against the signal observed at that position."""
    return sdr(v, v_hat)


def sir_matrix(x, x_hat):
    """
    Output SIR of every estimate for every hypothesized reference.

    Entry [i, j] projects estimate j onto each reference separately and
    compares the energy of the projection on reference i with the energy of
    the summed projections on all other references.

    Returns:
        np.ndarray [I, I] in dB, clamped to +-60
    """
    x = np.asarray(x, dtype=np.float64)
    x_hat = np.asarray(x_hat, dtype=np.float64)
    if x.ndim != 2 or x.shape != x_hat.shape:
        raise ShapeError(f"references {x.shape} and estimates {x_hat.shape} must both be [I, T]")
    energies = np.sum(x * x, axis=1)
    if np.any(energies <= 0):
        raise MetricError("SIR is undefined for an all-zero reference")
    sources = x.shape[0]
    # coefficients[j, k]: projection of estimate j on reference k
    coefficients = (x_hat @ x.T) / energies[None, :]
    matrix = np.zeros((sources, sources))
    for j in range(sources):
        projections = coefficients[j][:, None] * x
        for i in range(sources):
            interference = projections.sum(axis=0) - projections[i]
            matrix[i, j] = _clamped_ratio_db(float(projections[i] @ projections[i]),
                                             float(interference @ interference))
    return matrix


def resolve_permutation(x, x_hat):
    """Permutation p maximizing the mean SIR of estimate p[i] for reference i (ties keep the lowest)."""
    matrix = sir_matrix(x, x_hat)
    rows = np.arange(matrix.shape[0])
    best, best_perm = -np.inf, None
    for perm in permutations(range(matrix.shape[0])):
        score = float(matrix[rows, list(perm)].mean())
        if score > best:
            best, best_perm = score, perm
    return best_perm, best


def output_sir(x, x_hat, perm=None):
    """Mean output SIR under ``perm`` (resolved when not given)."""
    if perm is None:
        return resolve_permutation(x, x_hat)[1]
    matrix = sir_matrix(x, x_hat)
    return float(np.mean([matrix[i, p] for i, p in enumerate(perm)]))


def sdr_bf(x, x_hat):
    """
    Mean SDR of the beamformed sources after SIR-based permutation resolution.

    Args:
        x: references at the reference channel [I, T]
        x_hat: beamformer outputs [I, T]

    Returns:
        tuple: (mean SDR in dB, permutation where estimate p[i] matches reference i)
    """
    x = np.asarray(x, dtype=np.float64)
    x_hat = np.asarray(x_hat, dtype=np.float64)
    if x.shape[0] != x_hat.shape[0]:
        raise ShapeError(f"{x.shape[0]} references but {x_hat.shape[0]} estimates")
    perm, _ = resolve_permutation(x, x_hat)
    scores = [sdr(x[i], x_hat[p]) for i, p in enumerate(perm)]
    return float(np.mean(scores)), perm
