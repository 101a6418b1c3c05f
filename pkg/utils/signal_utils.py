#!/usr/bin/env python3
"""
Signal utilities for the virtual microphone toolkit.
This module holds the multichannel waveform container, the STFT/iSTFT pair
used by the beamformer and WAV file input/output.
"""

import logging
from dataclasses import dataclass

import numpy as np
import soundfile as sf
from scipy.signal import check_COLA, get_window

from utils.autodiff import bin_weights, frame_array, overlap_add_array
from utils.errors import ConfigError, LengthError, ShapeError, StorageError

logger = logging.getLogger(__name__)

WINDOWS = ('hann', 'sqrt_hann')
WAV_SUBTYPES = ('FLOAT', 'PCM_16')


@dataclass(frozen=True)
class MultichannelWave:
    """Time-domain signal with C channels of T samples"""

    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        samples = np.array(self.samples, dtype=np.float64)
        if samples.ndim == 1:
            samples = samples[None, :]
        if samples.ndim != 2:
            raise ShapeError(f"waveform must be [channels, samples], got shape {samples.shape}")
        if samples.shape[0] == 0 or samples.shape[1] == 0:
            raise LengthError(f"waveform must have at least one channel and one sample, got {samples.shape}")
        if not np.all(np.isfinite(samples)):
            raise ShapeError("waveform contains non-finite samples")
        if int(self.sample_rate) != self.sample_rate or self.sample_rate <= 0:
            raise ConfigError(f"sample rate must be a positive integer, got {self.sample_rate}")
        samples.setflags(write=False)
        object.__setattr__(self, 'samples', samples)
        object.__setattr__(self, 'sample_rate', int(self.sample_rate))

    @property
    def num_channels(self):
        return self.samples.shape[0]

    @property
    def length(self):
        return self.samples.shape[1]

    @property
    def duration(self):
        return self.length / self.sample_rate

    def channel(self, index):
        return self.samples[index]

    def select(self, indices):
        return MultichannelWave(self.samples[list(indices)], self.sample_rate)

    def energy(self):
        """Per-channel energy (sum of squares)."""
        return np.sum(self.samples ** 2, axis=1)

    @staticmethod
    def stack(waves):
        """Concatenate the channels of several waves with equal length and rate."""
        waves = list(waves)
        rates = {w.sample_rate for w in waves}
        lengths = {w.length for w in waves}
        if len(rates) != 1 or len(lengths) != 1:
            raise ShapeError(f"cannot stack waves with rates {sorted(rates)} and lengths {sorted(lengths)}")
        return MultichannelWave(np.concatenate([w.samples for w in waves], axis=0), rates.pop())


@dataclass(frozen=True)
class StftConfig:
    """Frame length, hop and window of the STFT, all in samples"""

    frame_length: int = 512
    hop: int = 128
    window: str = 'sqrt_hann'

    def __post_init__(self):
        if self.frame_length <= 0 or not 0 < self.hop <= self.frame_length:
            raise ConfigError(f"need 0 < hop <= frame_length, got hop={self.hop}, frame_length={self.frame_length}")
        if self.frame_length % 2:
            raise ConfigError(f"frame_length must be even, got {self.frame_length}")
        if self.window not in WINDOWS:
            raise ConfigError(f"unknown window '{self.window}', expected one of {WINDOWS}")

    @property
    def pad(self):
        return self.frame_length - self.hop

    @property
    def num_bins(self):
        return self.frame_length // 2 + 1

    def analysis_window(self):
        hann = get_window('hann', self.frame_length, fftbins=True)
        return np.sqrt(hann) if self.window == 'sqrt_hann' else hann

    def synthesis_window(self):
        if self.window == 'sqrt_hann':
            return np.sqrt(get_window('hann', self.frame_length, fftbins=True))
        return np.ones(self.frame_length)

    def is_cola(self):
        """Whether the analysis * synthesis window overlap-adds to a constant at this hop."""
        product = self.analysis_window() * self.synthesis_window()
        return bool(check_COLA(product, self.frame_length, self.frame_length - self.hop))

    def num_frames(self, length):
        """Frame count for a signal of ``length`` samples padded by ``pad`` on both sides."""
        span = length + 2 * self.pad - self.frame_length
        return 1 + int(np.ceil(max(span, 0) / self.hop))

    def padding(self, length):
        """(left, right) zero padding so that the frames tile the padded signal exactly."""
        total = (self.num_frames(length) - 1) * self.hop + self.frame_length
        return self.pad, total - length - self.pad

    def to_dict(self):
        return {'frame_length': self.frame_length, 'hop': self.hop, 'window': self.window}


@dataclass(frozen=True)
class Spectrogram:
    """One-sided complex STFT, bins are [channels, frames, frequency_bins]"""

    bins: np.ndarray
    config: StftConfig
    sample_rate: int
    length: int

    def __post_init__(self):
        bins = np.array(self.bins, dtype=np.complex128)
        if bins.ndim != 3 or bins.shape[2] != self.config.num_bins:
            raise ShapeError(f"spectrogram must be [channels, frames, {self.config.num_bins}], got {bins.shape}")
        if not np.all(np.isfinite(bins)):
            raise ShapeError("spectrogram contains non-finite values")
        bins.setflags(write=False)
        object.__setattr__(self, 'bins', bins)

    @property
    def num_channels(self):
        return self.bins.shape[0]

    @property
    def num_frames(self):
        return self.bins.shape[1]

    def energy(self):
        """Spectral energy with each one-sided bin counted by its multiplicity."""
        weights = bin_weights(self.config.frame_length)
        return float(np.sum(weights * np.abs(self.bins) ** 2) / self.config.frame_length)


def stft(wave, cfg=None):
    """
    Compute the one-sided STFT of every channel.

    Args:
        wave: MultichannelWave with at least ``frame_length`` samples
        cfg: StftConfig, default 512/128 sqrt-Hann

    Returns:
        Spectrogram: bins [C, frames, frame_length/2 + 1]
    """
    cfg = cfg or StftConfig()
    if wave.length < cfg.frame_length:
        raise LengthError(f"signal of {wave.length} samples is shorter than one frame ({cfg.frame_length})")
    padded = np.pad(wave.samples, ((0, 0), cfg.padding(wave.length)))
    frames = frame_array(padded, cfg.frame_length, cfg.hop) * cfg.analysis_window()
    return Spectrogram(np.fft.rfft(frames, axis=-1), cfg, wave.sample_rate, wave.length)


def overlap_add_frames(bins, cfg):
    """Inverse-transform every frame, apply the synthesis window and overlap-add (no normalization)."""
    frames = np.fft.irfft(bins, n=cfg.frame_length, axis=-1) * cfg.synthesis_window()
    return overlap_add_array(frames, cfg.hop)


def window_envelope(num_frames, cfg):
    """Overlap-added analysis * synthesis window, the istft normalizer."""
    product = cfg.analysis_window() * cfg.synthesis_window()
    return overlap_add_array(np.tile(product, (num_frames, 1)), cfg.hop)


def istft(spec):
    """
    Invert a Spectrogram by weighted overlap-add.

    Args:
        spec: Spectrogram produced with a COLA-valid configuration

    Returns:
        MultichannelWave: ``spec.length`` samples per channel
    """
    cfg = spec.config
    if not cfg.is_cola():
        raise ConfigError(f"window '{cfg.window}' is not COLA at hop {cfg.hop} for frame length {cfg.frame_length}")
    signal = overlap_add_frames(spec.bins, cfg)
    envelope = window_envelope(spec.num_frames, cfg)
    envelope = np.where(envelope > 1e-10, envelope, 1.0)
    signal = signal / envelope
    return MultichannelWave(signal[:, cfg.pad:cfg.pad + spec.length], spec.sample_rate)


def read_wav(path):
    """
    Read a mono or multichannel WAV file.

    Returns:
        MultichannelWave: samples as float64 in [-1, 1] for PCM files
    """
    try:
        data, sample_rate = sf.read(str(path), dtype='float64', always_2d=True)
    except (sf.SoundFileError, OSError) as e:
        raise StorageError(f"cannot read {path}: {e}")
    return MultichannelWave(data.T, sample_rate)


def write_wav(path, wave, subtype='FLOAT'):
    """
    Write a MultichannelWave as a little-endian WAV file.

    Args:
        path: destination file
        wave: MultichannelWave
        subtype: 'FLOAT' (IEEE float32) or 'PCM_16'
    """
    if subtype not in WAV_SUBTYPES:
        raise ConfigError(f"unsupported WAV subtype '{subtype}', expected one of {WAV_SUBTYPES}")
    data = wave.samples.T
    if subtype == 'PCM_16':
        peak = float(np.max(np.abs(data)))
        if peak > 1.0:
            logger.warning(f"Clipping {path}: peak {peak:.3f} exceeds PCM full scale")
            data = np.clip(data, -1.0, 1.0)
    try:
        sf.write(str(path), data, wave.sample_rate, subtype=subtype, format='WAV', endian='LITTLE')
    except (sf.SoundFileError, OSError) as e:
        raise StorageError(f"cannot write {path}: {e}")
    return path
