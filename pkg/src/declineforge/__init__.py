"""Cognitive-decline progression modeling on synthetic cohorts."""

__version__ = "0.1.0"

from .config import PipelineConfig, load_config
from .errors import (
    ConfigError,
    DeclineForgeError,
    DependencyError,
    TrainingDivergedError,
)

__all__ = [
    "PipelineConfig",
    "load_config",
    "DeclineForgeError",
    "ConfigError",
    "DependencyError",
    "TrainingDivergedError",
]
