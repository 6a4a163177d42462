"""Exception types shared across the engine."""


class SkipgateError(Exception):
    """Base class for all engine errors."""


class ShapeError(SkipgateError):
    """Tensor shapes are incompatible for the requested operation."""


class CapacityError(SkipgateError):
    """A sequence exceeds the model's maximum context length."""


class StateError(SkipgateError):
    """An operation was invoked in the wrong mode (train vs inference)."""


class ConfigError(SkipgateError):
    """A configuration is malformed, inconsistent, or incomplete."""


class PlanError(SkipgateError):
    """A routing or drop plan does not match the model it is applied to."""


class DataError(SkipgateError):
    """A corpus or dataset is missing, empty, or unusable."""


class CheckpointError(SkipgateError):
    """A checkpoint file is missing or cannot be parsed."""
