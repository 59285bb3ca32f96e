class ReplabError(Exception):
    pass


class ConfigError(ReplabError):
    """Bad or inconsistent configuration (CLI exit code 2)."""


class ValidationError(ReplabError, ValueError):
    """An argument violates a documented precondition."""


class UsageError(ReplabError, RuntimeError):
    """An operation was called in a state that does not allow it."""


class TrainingAbort(ReplabError):
    """Non-finite loss during training (CLI exit code 3)."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}
