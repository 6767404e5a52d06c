class ConfigurationError(ValueError):
    """Shapes or settings that cannot work together."""


class InvalidInputError(ValueError):
    """A caller-supplied value outside an operation's domain."""


class TrainingDivergedError(RuntimeError):
    """Raised when a loss or parameter becomes non-finite during training."""

    def __init__(self, message, dump=None):
        super().__init__(message)
        self.dump = dump or {}
