import json
import os
from dataclasses import dataclass, field

from utils.errors import ConfigError

SYSTEMS = ('mixture', 'rm2', 'rm3', 'vm-copy', 'vm')
MASK_SOURCES = ('auto', 'separator', 'oracle')


class Config:
    """Base configuration class (desk scale)"""

    # Logging configuration
    LOG_LEVEL = os.environ.get('LOG_LEVEL') or 'INFO'
    LOG_FILE = os.environ.get('LOG_FILE')

    # Data generation
    SEED = 0
    SAMPLE_RATE = 8000
    DURATION = 2.0  # seconds per utterance
    NUM_SOURCES = 3
    NOISE_SNR_DB = 20.0
    NUM_TRAIN = 1000
    NUM_DEV = 100
    NUM_EVAL = 100
    RIR_MAX_ORDER = None  # None: every image within 1.5 * t60
    RIR_INTERP_TAPS = 81
    NUM_WORKERS = int(os.environ.get('VME_NUM_WORKERS') or 1)

    # STFT for masks and beamforming
    STFT_FRAME_LENGTH = 512
    STFT_HOP = 128
    STFT_WINDOW = 'sqrt_hann'

    # TDCN (N, L, B, H, P, X, R)
    BASIS_SIZE = 64
    KERNEL_LENGTH = 16
    BOTTLENECK = 32
    HIDDEN = 64
    CONV_KERNEL = 3
    BLOCKS_PER_REPEAT = 4
    REPEATS = 2
    SEPARATOR_MASK_ACTIVATION = 'relu'
    VME_MASK_ACTIVATION = 'linear'

    # Training
    TRAIN_SEED = 0
    LEARNING_RATE = 1e-3
    CLIP_THRESHOLD = 5.0
    BATCH_SIZE = 4
    SEPARATOR_EPOCHS = 15
    VME_EPOCHS = 10
    ALPHA = 0.3
    SNR_EPSILON = 1e-8
    LOSS_FLOOR_DB = -60.0

    # Evaluation
    ALPHAS = (0.0, 0.1, 0.3, 0.5, 0.7, 0.9, 1.0)
    SYSTEMS = SYSTEMS
    MASK_SOURCE = 'auto'  # separator masks when a separator checkpoint is given, oracle masks otherwise
    NUM_EVAL_WORKERS = int(os.environ.get('VME_NUM_WORKERS') or 1)


class DeskScaleConfig(Config):
    """Desk-scale configuration: CPU-trainable in minutes"""


class FullScaleConfig(Config):
    """Full-scale configuration: 30k training mixtures and the large TDCN"""
    NUM_TRAIN = 30000
    NUM_DEV = 5000
    NUM_EVAL = 5000
    BASIS_SIZE = 256
    KERNEL_LENGTH = 20
    BOTTLENECK = 256
    HIDDEN = 512
    CONV_KERNEL = 3
    BLOCKS_PER_REPEAT = 8
    REPEATS = 4
    LEARNING_RATE = 1e-4
    SEPARATOR_EPOCHS = 100
    VME_EPOCHS = 100


class TestingConfig(Config):
    """Testing configuration: tiny networks, short utterances, low reflection order"""
    DURATION = 0.25
    NUM_TRAIN = 4
    NUM_DEV = 2
    NUM_EVAL = 2
    RIR_MAX_ORDER = 2
    STFT_FRAME_LENGTH = 64
    STFT_HOP = 16
    BASIS_SIZE = 8
    KERNEL_LENGTH = 8
    BOTTLENECK = 8
    HIDDEN = 8
    BLOCKS_PER_REPEAT = 2
    REPEATS = 1
    BATCH_SIZE = 2
    SEPARATOR_EPOCHS = 2
    VME_EPOCHS = 2
    ALPHAS = (0.0, 1.0)


# Configuration dictionary
config = {
    'desk': DeskScaleConfig,
    'full': FullScaleConfig,
    'testing': TestingConfig,
    'default': DeskScaleConfig
}


def _positive_int(value):
    return isinstance(value, int) and not isinstance(value, bool) and value > 0


def _non_negative_int(value):
    return isinstance(value, int) and not isinstance(value, bool) and value >= 0


def _positive_number(value):
    return isinstance(value, (int, float)) and not isinstance(value, bool) and value > 0


def _number(value):
    return isinstance(value, (int, float)) and not isinstance(value, bool)


def _unit_interval(value):
    return _number(value) and 0.0 <= value <= 1.0


# section -> key -> (validator, description)
SCHEMA = {
    'data': {
        'seed': (_non_negative_int, 'a non-negative integer'),
        'sample_rate': (_positive_int, 'a positive integer'),
        'duration': (_positive_number, 'a positive number of seconds'),
        'num_sources': (_positive_int, 'a positive integer'),
        'noise_snr_db': (_number, 'a number of dB'),
        'num_train': (_non_negative_int, 'a non-negative integer'),
        'num_dev': (_non_negative_int, 'a non-negative integer'),
        'num_eval': (_non_negative_int, 'a non-negative integer'),
        'rir_max_order': (lambda v: v is None or _non_negative_int(v), 'null or a non-negative integer'),
        'rir_interp_taps': (lambda v: _non_negative_int(v) and (v == 0 or v % 2 == 1), '0 or an odd positive integer'),
        'num_workers': (lambda v: isinstance(v, int) and v != 0, 'a non-zero integer (joblib n_jobs)'),
    },
    'model': {
        'stft_frame_length': (lambda v: _positive_int(v) and v % 2 == 0, 'an even positive integer'),
        'stft_hop': (_positive_int, 'a positive integer'),
        'stft_window': (lambda v: v in ('hann', 'sqrt_hann'), "'hann' or 'sqrt_hann'"),
        'basis_size': (_positive_int, 'a positive integer'),
        'kernel_length': (lambda v: _positive_int(v) and v % 2 == 0, 'an even positive integer'),
        'bottleneck': (_positive_int, 'a positive integer'),
        'hidden': (_positive_int, 'a positive integer'),
        'conv_kernel': (_positive_int, 'a positive integer'),
        'blocks_per_repeat': (_positive_int, 'a positive integer'),
        'repeats': (_positive_int, 'a positive integer'),
        'separator_mask_activation': (lambda v: v in ('relu', 'sigmoid', 'linear'), "'relu', 'sigmoid' or 'linear'"),
        'vme_mask_activation': (lambda v: v in ('relu', 'sigmoid', 'linear'), "'relu', 'sigmoid' or 'linear'"),
    },
    'train': {
        'train_seed': (_non_negative_int, 'a non-negative integer'),
        'learning_rate': (_positive_number, 'a positive number'),
        'clip_threshold': (_positive_number, 'a positive number'),
        'batch_size': (_positive_int, 'a positive integer'),
        'separator_epochs': (_non_negative_int, 'a non-negative integer'),
        'vme_epochs': (_non_negative_int, 'a non-negative integer'),
        'alpha': (_unit_interval, 'a number in [0, 1]'),
        'snr_epsilon': (_positive_number, 'a positive number'),
        'loss_floor_db': (_number, 'a number of dB'),
    },
    'eval': {
        'alphas': (lambda v: isinstance(v, (list, tuple)) and len(v) > 0 and all(_unit_interval(a) for a in v),
                   'a non-empty list of numbers in [0, 1]'),
        'systems': (lambda v: isinstance(v, (list, tuple)) and len(v) > 0 and all(s in SYSTEMS for s in v),
                    f"a non-empty list drawn from {list(SYSTEMS)}"),
        'mask_source': (lambda v: v in MASK_SOURCES, f"one of {list(MASK_SOURCES)}"),
        'num_eval_workers': (lambda v: isinstance(v, int) and v != 0, 'a non-zero integer (joblib n_jobs)'),
    },
}


@dataclass
class RunConfig:
    """Resolved settings of one run: a preset overlaid with a JSON config file and CLI flags"""

    preset: str = 'default'
    data: dict = field(default_factory=dict)
    model: dict = field(default_factory=dict)
    train: dict = field(default_factory=dict)
    eval: dict = field(default_factory=dict)

    @classmethod
    def from_preset(cls, name=None):
        name = name or os.environ.get('VME_PRESET') or 'default'
        if name not in config:
            raise ConfigError(f"unknown preset '{name}', expected one of {sorted(config)}")
        preset = config[name]
        sections = {}
        for section, keys in SCHEMA.items():
            values = {}
            for key in keys:
                value = getattr(preset, key.upper())
                values[key] = list(value) if isinstance(value, tuple) else value
            sections[section] = values
        return cls(preset=name, **sections)

    @classmethod
    def load(cls, path=None):
        """Build the run config from an optional JSON file with keys preset, data, model, train, eval."""
        if path is None:
            return cls.from_preset()
        try:
            with open(path) as handle:
                document = json.load(handle)
        except OSError as e:
            raise ConfigError(f"cannot read config file {path}: {e.strerror}")
        except json.JSONDecodeError as e:
            raise ConfigError(f"config file {path} is not valid JSON: {e.msg} at line {e.lineno}")
        if not isinstance(document, dict):
            raise ConfigError(f"config file {path} must hold a JSON object")
        unknown = set(document) - set(SCHEMA) - {'preset'}
        if unknown:
            raise ConfigError(f"unknown config sections {sorted(unknown)}")
        run = cls.from_preset(document.get('preset'))
        for section in SCHEMA:
            values = document.get(section) or {}
            if not isinstance(values, dict):
                raise ConfigError(f"config section '{section}' must be an object")
            for key, value in values.items():
                run.set(section, key, value)
        return run

    def set(self, section, key, value):
        if section not in SCHEMA:
            raise ConfigError(f"unknown config section '{section}'")
        if key not in SCHEMA[section]:
            raise ConfigError(f"unknown key '{key}' in config section '{section}'")
        validator, description = SCHEMA[section][key]
        if not validator(value):
            raise ConfigError(f"{section}.{key} must be {description}, got {value!r}")
        getattr(self, section)[key] = value
        if section == 'model' and key in ('stft_frame_length', 'stft_hop'):
            self._check_stft()
        return self

    def _check_stft(self):
        if self.model['stft_hop'] > self.model['stft_frame_length']:
            raise ConfigError(f"model.stft_hop {self.model['stft_hop']} exceeds "
                              f"model.stft_frame_length {self.model['stft_frame_length']}")

    def to_dict(self):
        return {'preset': self.preset, 'data': dict(self.data), 'model': dict(self.model),
                'train': dict(self.train), 'eval': dict(self.eval)}
