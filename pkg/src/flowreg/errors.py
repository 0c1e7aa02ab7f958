"""Exception hierarchy shared by every module.

The CLI maps any ``FlowRegError`` to exit code 1 and prints the class name,
so each failure mode gets its own subclass.
"""


class FlowRegError(Exception):
    """Base class for domain errors."""


class LengthMismatch(FlowRegError, ValueError):
    pass


class TooFewPoints(FlowRegError, ValueError):
    pass


class TooFewViews(FlowRegError, ValueError):
    pass


class DegenerateGeometry(FlowRegError, ValueError):
    pass


class DegenerateScale(FlowRegError, ValueError):
    pass


class EmptyCloud(FlowRegError, ValueError):
    pass


class EmptyPatch(FlowRegError, ValueError):
    pass


class EmptyInput(FlowRegError, ValueError):
    pass


class InvalidCloud(FlowRegError, ValueError):
    """Raised when coordinates are non-finite or the array is not N x 3."""


class InvalidTransform(FlowRegError, ValueError):
    pass


class ShapeMismatch(FlowRegError, ValueError):
    pass


class NonFiniteState(FlowRegError, FloatingPointError):
    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


class NonFiniteLoss(FlowRegError, FloatingPointError):
    pass


class EmptyDataset(FlowRegError, ValueError):
    pass


class NoValidSample(FlowRegError, RuntimeError):
    pass


class RetryExhausted(FlowRegError, RuntimeError):
    pass


class UnsupportedFormat(FlowRegError, ValueError):
    pass


class MalformedHeader(FlowRegError, ValueError):
    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class NonFiniteValue(FlowRegError, ValueError):
    pass


class CheckpointError(FlowRegError, ValueError):
    pass


class ConfigError(FlowRegError, ValueError):
    pass
