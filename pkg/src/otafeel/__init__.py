"""Federated edge learning over a fading multiple-access channel with a multi-antenna server."""

__version__ = "0.1.0"

from .core import (  # noqa: E402
    ConfigError,
    LearningRateSchedule,
    PowerSchedule,
    RngStream,
    SimConfig,
    StreamLabel,
    derive_stream,
)

__all__ = [
    "__version__",
    "ConfigError",
    "LearningRateSchedule",
    "PowerSchedule",
    "RngStream",
    "SimConfig",
    "StreamLabel",
    "derive_stream",
]
