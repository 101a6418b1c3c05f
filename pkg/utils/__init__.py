"""
Utils package for the virtual microphone toolkit.
Contains the signal, room simulation, network, beamforming, loss and metric modules.
"""

from .errors import (CheckpointError, ConfigError, DatasetError, GeometryError, LengthError, LossError, MetricError,
                     ReportError, ScalingError, ShapeError, StorageError, TrainingError, VmeError)
from .signal_utils import MultichannelWave, Spectrogram, StftConfig, istft, read_wav, stft, write_wav
from .room_utils import RoomSpec, Scene, MixtureSample, image_method_rir, sample_scene, synth_speech_like, synthesize
from .beamformer import estimate_scm, magnitude_ratio_masks, mask_bf, mvdr_souden
from .losses import MtlConfig, mtl_loss, pit_bf_loss, snr_loss, vm_loss
from .metrics import sdr, sdr_bf, sdr_vm

__all__ = [
    'CheckpointError',
    'ConfigError',
    'DatasetError',
    'GeometryError',
    'LengthError',
    'LossError',
    'MetricError',
    'ReportError',
    'ScalingError',
    'ShapeError',
    'StorageError',
    'TrainingError',
    'VmeError',
    'MultichannelWave',
    'Spectrogram',
    'StftConfig',
    'istft',
    'read_wav',
    'stft',
    'write_wav',
    'RoomSpec',
    'Scene',
    'MixtureSample',
    'image_method_rir',
    'sample_scene',
    'synth_speech_like',
    'synthesize',
    'estimate_scm',
    'magnitude_ratio_masks',
    'mask_bf',
    'mvdr_souden',
    'MtlConfig',
    'mtl_loss',
    'pit_bf_loss',
    'snr_loss',
    'vm_loss',
    'sdr',
    'sdr_bf',
    'sdr_vm'
]
