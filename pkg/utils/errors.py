"""
Exception types for the virtual microphone toolkit.

Every error carries a short machine-readable ``category`` that the command
line surfaces as ``error: <category>: <message>``.
"""


class VmeError(Exception):
    """Base class for all toolkit errors"""

    category = 'internal'
    exit_code = 1

    def __init__(self, message):
        super().__init__(message)
        self.message = message

    def one_line(self):
        text = ' '.join(str(self.message).split())
        return f"error: {self.category}: {text}"


class ConfigError(VmeError, ValueError):
    category = 'config'
    exit_code = 2


class LengthError(VmeError, ValueError):
    category = 'length'
    exit_code = 3


class ShapeError(VmeError, ValueError):
    category = 'shape'
    exit_code = 3


class GeometryError(VmeError, ValueError):
    category = 'geometry'
    exit_code = 4


class ScalingError(VmeError, ValueError):
    category = 'scaling'
    exit_code = 4


class LossError(VmeError, ValueError):
    category = 'loss'
    exit_code = 5


class TrainingError(VmeError, RuntimeError):
    category = 'training'
    exit_code = 6


class CheckpointError(VmeError):
    category = 'checkpoint'
    exit_code = 7


class DatasetError(VmeError):
    category = 'dataset'
    exit_code = 8


class ReportError(VmeError):
    category = 'report'
    exit_code = 9


class MetricError(VmeError, ValueError):
    category = 'metric'
    exit_code = 5


class StorageError(VmeError, OSError):
    """Filesystem or audio file failure outside the toolkit's own checks"""

    category = 'io'
    exit_code = 10
