class ConfigError(ValueError):
    """Invalid configuration or precondition violation (CLI exit code 2)."""


class BlowupError(RuntimeError):
    """Non-finite values produced during integration, training or rollout."""

    def __init__(self, message, where=None):
        super().__init__(message)
        self.where = where


class FormatError(ValueError):
    """Malformed dataset container or checkpoint on disk."""
