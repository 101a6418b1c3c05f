#!/usr/bin/env python3
"""
Mask-based MVDR beamforming in the Souden formulation.

Every step between the augmented array signal and the beamformed waveform
(STFT, spatial covariance estimation, diagonal loading, weight computation,
filtering, inverse STFT) is built from autodiff operations so that a
time-domain loss on the output can be backpropagated into the network that
produced the virtual channel. Masks come from a frozen separator (or from
oracle source images) and are treated as constants.
"""

import json
import logging
from dataclasses import dataclass

import numpy as np

from utils import autodiff as ad
from utils.autodiff import ComplexTensor
from utils.errors import ConfigError, ShapeError
from utils.signal_utils import MultichannelWave, Spectrogram, StftConfig, stft, window_envelope

logger = logging.getLogger(__name__)

MASK_CEILING = 2.0
MASK_EPS = 1e-8
LOADING = 1e-6
LOADING_FLOOR = 1e-12
TRACE_EPS = 1e-10


@dataclass(frozen=True)
class TfMask:
    """Per-source time-frequency masks, values [I, frames, bins] in [0, ceiling]"""

    values: np.ndarray
    ceiling: float = MASK_CEILING

    def __post_init__(self):
        values = np.array(self.values, dtype=np.float64)
        if values.ndim != 3:
            raise ShapeError(f"mask must be [sources, frames, bins], got {values.shape}")
        if not np.all(np.isfinite(values)) or values.min() < 0 or values.max() > self.ceiling:
            raise ShapeError(f"mask values must be finite and within [0, {self.ceiling}]")
        values.setflags(write=False)
        object.__setattr__(self, 'values', values)

    @property
    def num_sources(self):
        return self.values.shape[0]


@dataclass
class SpatialCovariance:
    """Target and noise SCMs per source and bin, [I, K, C, C], plus bins that fell back to the unmasked average"""

    target: ComplexTensor
    noise: ComplexTensor
    target_fallback: np.ndarray
    noise_fallback: np.ndarray


@dataclass(frozen=True)
class AugmentedArray:
    """Real and virtual channels in physical order: left real, middle, right real"""

    wave: MultichannelWave
    provenance: tuple

    def __post_init__(self):
        if len(self.provenance) != self.wave.num_channels:
            raise ShapeError(f"{len(self.provenance)} provenance flags for {self.wave.num_channels} channels")
        if any(p not in ('real', 'virtual') for p in self.provenance):
            raise ConfigError(f"provenance flags must be 'real' or 'virtual', got {self.provenance}")

    @classmethod
    def from_signals(cls, r, v_hat, virtual=True):
        """Interleave two real channels with the (virtual) middle channel."""
        if r.num_channels != 2 or v_hat.num_channels != 1:
            raise ShapeError(f"need 2 real and 1 middle channel, got {r.num_channels} and {v_hat.num_channels}")
        samples = np.stack([r.samples[0], v_hat.samples[0], r.samples[1]])
        middle = 'virtual' if virtual else 'real'
        return cls(MultichannelWave(samples, r.sample_rate), ('real', middle, 'real'))


def augment(r, v_hat):
    """Differentiable ȳ = [r_0, v̂, r_1] from [2, T] real and [1, T] virtual channels."""
    r, v_hat = ad.as_tensor(r), ad.as_tensor(v_hat)
    if r.ndim != 2 or r.shape[0] != 2 or v_hat.ndim != 2 or v_hat.shape[0] != 1 or r.shape[1] != v_hat.shape[1]:
        raise ShapeError(f"cannot augment real channels {r.shape} with virtual channel {v_hat.shape}")
    return ad.concatenate([r[0:1], v_hat, r[1:2]], axis=0)


def stft_tensor(x, cfg):
    """Differentiable counterpart of signal_utils.stft: [C, T] -> ComplexTensor [C, frames, bins]."""
    x = ad.as_tensor(x)
    length = x.shape[-1]
    if length < cfg.frame_length:
        raise ShapeError(f"signal of {length} samples is shorter than one frame ({cfg.frame_length})")
    padded = ad.pad(x, ((0, 0),) * (x.ndim - 1) + (cfg.padding(length),))
    frames = ad.frame(padded, cfg.frame_length, cfg.hop) * cfg.analysis_window()
    return ad.rfft(frames)


def istft_tensor(spec, cfg, length):
    """Differentiable counterpart of signal_utils.istft: ComplexTensor [..., frames, bins] -> [..., length]."""
    if not cfg.is_cola():
        raise ConfigError(f"window '{cfg.window}' is not COLA at hop {cfg.hop} for frame length {cfg.frame_length}")
    frames = ad.irfft(spec, cfg.frame_length) * cfg.synthesis_window()
    signal = ad.overlap_add(frames, cfg.hop)
    envelope = window_envelope(spec.shape[-2], cfg)
    signal = signal * (1.0 / np.where(envelope > 1e-10, envelope, 1.0))
    return signal[..., cfg.pad:cfg.pad + length]


def magnitude_ratio_masks(obs_spec, sep_specs, ceiling=MASK_CEILING, eps=MASK_EPS):
    """
    Masks from the magnitude ratio of separated to observed spectra.

    Args:
        obs_spec: single-channel Spectrogram of the observation at the reference channel
        sep_specs: Spectrogram with one channel per separated source

    Returns:
        TfMask: min(|sep_i| / (|obs| + eps), ceiling)
    """
    obs = obs_spec.bins if isinstance(obs_spec, Spectrogram) else np.asarray(obs_spec)
    sep = sep_specs.bins if isinstance(sep_specs, Spectrogram) else np.asarray(sep_specs)
    if obs.ndim == 2:
        obs = obs[None]
    if obs.shape[0] != 1 or obs.shape[1:] != sep.shape[1:]:
        raise ShapeError(f"observation {obs.shape} and separated spectra {sep.shape} do not match")
    values = np.minimum(np.abs(sep) / (np.abs(obs) + eps), ceiling)
    return TfMask(values, ceiling)


def _mask_weights(mask, kind):
    """Normalize masks [I, frames, K] over frames; bins with zero mass fall back to uniform weights."""
    total = mask.sum(axis=1)
    fallback = total <= 0
    if np.any(fallback):
        logger.warning(f"{int(fallback.sum())} all-zero {kind} mask bins, using the unmasked average")
    uniform = np.full_like(mask, 1.0 / mask.shape[1])
    weights = np.where(fallback[:, None, :], uniform, mask / np.where(fallback, 1.0, total)[:, None, :])
    # [I, K, 1, frames] to broadcast against [1, K, C, frames]
    return np.transpose(weights, (0, 2, 1))[:, :, None, :], fallback


def _weighted_outer(yr, yi, weights):
    wr, wi = yr * weights, yi * weights
    re = wr @ yr.swapaxes(-1, -2) + wi @ yi.swapaxes(-1, -2)
    im = wi @ yr.swapaxes(-1, -2) - wr @ yi.swapaxes(-1, -2)
    scm = ComplexTensor(re, im)
    # exact Hermitian symmetry
    return (scm + scm.hermitian()) * 0.5


def estimate_scm(spec, mask):
    """
    Mask-weighted spatial covariance matrices.

    Phi_S(f) = sum_t m(t,f) y y^H / sum_t m(t,f), and Phi_N the same with
    the complementary mask clip(1 - m, 0, 1).

    Args:
        spec: ComplexTensor or Spectrogram, [C, frames, K]
        mask: TfMask or array [I, frames, K]

    Returns:
        SpatialCovariance with [I, K, C, C] matrices
    """
    if isinstance(spec, Spectrogram):
        spec = ComplexTensor.from_numpy(spec.bins)
    values = mask.values if isinstance(mask, TfMask) else np.asarray(mask, dtype=np.float64)
    channels, frames, bins = spec.shape
    if values.ndim != 3 or values.shape[1:] != (frames, bins):
        raise ShapeError(f"mask {values.shape} does not match spectrogram frames/bins {(frames, bins)}")

    yr = spec.re.transpose(2, 0, 1).reshape(1, bins, channels, frames)
    yi = spec.im.transpose(2, 0, 1).reshape(1, bins, channels, frames)
    target_weights, target_fallback = _mask_weights(values, 'target')
    noise_weights, noise_fallback = _mask_weights(np.clip(1.0 - values, 0.0, 1.0), 'noise')
    return SpatialCovariance(target=_weighted_outer(yr, yi, target_weights),
                             noise=_weighted_outer(yr, yi, noise_weights),
                             target_fallback=target_fallback,
                             noise_fallback=noise_fallback)


def diagonal_loading(matrix, delta=LOADING, floor=LOADING_FLOOR):
    """Phi + (delta * tr(Phi) / C + floor) * I, differentiable in Phi."""
    channels = matrix.shape[-1]
    eye = np.eye(channels)
    trace = (matrix.re * eye).sum(axis=(-2, -1), keepdims=True)
    return ComplexTensor(matrix.re + (trace * (delta / channels) + floor) * eye, matrix.im)


def mvdr_souden(scm, ref_channel=0, loading=LOADING, trace_eps=TRACE_EPS):
    """
    Souden MVDR weights w = Phi_N^-1 Phi_S u / tr(Phi_N^-1 Phi_S).

    Args:
        scm: SpatialCovariance
        ref_channel: index of the reference channel u
        loading: relative diagonal loading of Phi_N

    Returns:
        tuple: (ComplexTensor weights [I, K, C], degenerate flags [I, K])
    """
    channels = scm.target.shape[-1]
    if not 0 <= ref_channel < channels:
        raise ShapeError(f"reference channel {ref_channel} out of range for {channels} channels")
    noise = diagonal_loading(scm.noise, loading)
    product = ad.complex_inv(noise) @ scm.target
    trace = product.trace()
    degenerate = np.sqrt(trace.re.data ** 2 + trace.im.data ** 2) < trace_eps
    if np.any(degenerate):
        logger.warning(f"{int(degenerate.sum())} bins with degenerate tr(Phi_N^-1 Phi_S), zeroing their weights")
    shape = trace.shape + (1,)
    safe_trace = ComplexTensor((trace.re + degenerate.astype(np.float64)).reshape(shape), trace.im.reshape(shape))
    weights = product[..., :, ref_channel] / safe_trace
    weights = weights * (1.0 - degenerate.astype(np.float64))[..., None]
    return weights, degenerate


def apply_bf(weights, spec):
    """
    Filter the array spectrogram: x̂(t, f) = w(f)^H y(t, f).

    Args:
        weights: ComplexTensor [I, K, C]
        spec: ComplexTensor [C, frames, K]

    Returns:
        ComplexTensor [I, frames, K]
    """
    if isinstance(spec, Spectrogram):
        spec = ComplexTensor.from_numpy(spec.bins)
    if isinstance(weights, np.ndarray):
        weights = ComplexTensor.from_numpy(weights)
    sources, bins, channels = weights.shape
    if spec.shape[0] != channels or spec.shape[2] != bins:
        raise ShapeError(f"weights {weights.shape} do not match spectrogram {spec.shape}")
    frames = spec.shape[1]
    y = spec.transpose(2, 0, 1).reshape(1, bins, channels, frames)
    w_h = weights.conj().reshape(sources, bins, 1, channels)
    return (w_h @ y).reshape(sources, bins, frames).transpose(0, 2, 1)


def mask_bf(ybar, masks, cfg=None, ref_channel=0, loading=LOADING):
    """
    Full beamformer: STFT, SCMs, MVDR weights, filtering and inverse STFT.

    Args:
        ybar: DiffTensor or array [C, T], the (augmented) array signal
        masks: TfMask or array [I, frames, K]
        cfg: StftConfig

    Returns:
        tuple: (DiffTensor [I, T] beamformed estimates, dict of diagnostics)
    """
    cfg = cfg or StftConfig()
    ybar = ad.as_tensor(ybar)
    spec = stft_tensor(ybar, cfg)
    scm = estimate_scm(spec, masks)
    weights, degenerate = mvdr_souden(scm, ref_channel, loading)
    enhanced = apply_bf(weights, spec)
    estimates = istft_tensor(enhanced, cfg, ybar.shape[-1])
    info = {
        'weights': weights,
        'degenerate_bins': degenerate,
        'target_fallback_bins': scm.target_fallback,
        'noise_fallback_bins': scm.noise_fallback,
    }
    return estimates, info


def compute_masks(observation, separated, cfg=None, sample_rate=8000):
    """Magnitude-ratio masks from waveforms: observation [1, T] at the reference channel, separated [I, T]."""
    cfg = cfg or StftConfig()
    obs_spec = stft(MultichannelWave(np.asarray(observation), sample_rate), cfg)
    sep_spec = stft(MultichannelWave(np.asarray(separated), sample_rate), cfg)
    return magnitude_ratio_masks(obs_spec, sep_spec)


def beamform(wave, masks, cfg=None, ref_channel=0):
    """Non-differentiable convenience wrapper of mask_bf for evaluation, returns (MultichannelWave, info)."""
    estimates, info = mask_bf(wave.samples, masks, cfg, ref_channel)
    return MultichannelWave(estimates.data, wave.sample_rate), info


def dump_weights(weights, path, sample_rate, frame_length, provenance=None):
    """Write per-frequency MVDR weights as JSON: one entry per source and bin with [re, im] pairs."""
    values = weights.numpy() if isinstance(weights, ComplexTensor) else np.asarray(weights)
    freqs = np.fft.rfftfreq(frame_length, d=1.0 / sample_rate)
    document = {
        'sample_rate': sample_rate,
        'frame_length': frame_length,
        'provenance': list(provenance) if provenance else None,
        'sources': [
            [{'frequency_hz': float(f), 'weights': [[float(w.real), float(w.imag)] for w in values[i, k]]}
             for k, f in enumerate(freqs)]
            for i in range(values.shape[0])
        ],
    }
    with open(path, 'w') as handle:
        json.dump(document, handle, indent=1, sort_keys=True)
    logger.info(f"Wrote MVDR weights for {values.shape[0]} sources to {path}")
    return path
