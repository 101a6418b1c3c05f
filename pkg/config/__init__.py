"""
Configuration package for the virtual microphone toolkit.
Contains scale presets and the run configuration loader.
"""

from .config import Config, DeskScaleConfig, FullScaleConfig, RunConfig, TestingConfig, config

__all__ = [
    'Config',
    'DeskScaleConfig',
    'FullScaleConfig',
    'RunConfig',
    'TestingConfig',
    'config'
]
