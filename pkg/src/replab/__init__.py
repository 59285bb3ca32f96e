"""Representation-learning lab for pixel-based continuous control."""

from replab.errors import ConfigError, ReplabError, UsageError, ValidationError

__version__ = "0.1.0"

__all__ = ["ConfigError", "ReplabError", "UsageError", "ValidationError", "__version__"]
