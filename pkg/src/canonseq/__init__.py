"""Point-cloud generation through a canonical sphere, grouped codebooks and a token transformer."""

from .config import PipelineConfig, load_config
from .errors import ConfigError, DependencyError, DomainError, FormatError, TrainingError, WriteError

__version__ = "0.1.0"

__all__ = [
    "PipelineConfig",
    "load_config",
    "ConfigError",
    "DependencyError",
    "DomainError",
    "FormatError",
    "TrainingError",
    "WriteError",
]
