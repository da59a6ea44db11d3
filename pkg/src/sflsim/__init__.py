"""Desk-scale split federated learning simulator."""

__version__ = "0.1.0"

from .config import TrainingConfig, parse_config, serialize_config  # noqa: E402
from .errors import ConfigError, DataFormatError, ProtocolError  # noqa: E402

__all__ = [
    "ConfigError",
    "DataFormatError",
    "ProtocolError",
    "TrainingConfig",
    "parse_config",
    "serialize_config",
    "__version__",
]
