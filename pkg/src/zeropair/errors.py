class ConfigError(ValueError):
    """Invalid configuration: mismatched sizes, bad modes, unusable settings."""


class InputError(ValueError):
    """Data that violates an operation's preconditions."""


class NumericalError(RuntimeError):
    """A non-finite loss or parameter was produced during training."""

    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report or {}
