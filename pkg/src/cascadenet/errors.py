"""Exception hierarchy shared across the package."""


class CascadeNetError(Exception):
    """Base class for all package errors."""


class ConfigurationError(CascadeNetError):
    """A config, shape, or hyperparameter is structurally wrong."""


class InvalidInputError(CascadeNetError):
    """Runtime data violates an operation's precondition."""


class UsageError(CascadeNetError):
    """An API was called in a way its contract forbids."""


class CheckpointError(CascadeNetError):
    """A checkpoint file failed to load; the message names the cause."""


class UndefinedMetricError(CascadeNetError):
    """A metric is mathematically undefined for the given inputs."""


class TrainingError(CascadeNetError):
    """The training loop hit a fatal condition (NaN gradient, empty class)."""
