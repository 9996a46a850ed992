"""Exception hierarchy shared by every module."""


class EgoMTLError(Exception):
    """Base class for library errors."""


class DimensionError(EgoMTLError, ValueError):
    """Tensor shapes or axes are incompatible with an operation."""


class ConfigurationError(EgoMTLError, ValueError):
    """A configuration value is invalid or an object is not ready for the request."""


class ContractError(EgoMTLError, ValueError):
    """A precondition on the arguments of a call was violated."""


class EmptySupervisionError(EgoMTLError, ValueError):
    """A coordinate loss was requested on a batch with no valid frames."""


class SupervisionError(EgoMTLError, ValueError):
    """A declared task has no labels in the batch and cannot be skipped."""


class UndefinedMetricError(EgoMTLError, ValueError):
    """A metric has no samples to be computed over."""


class StateError(EgoMTLError, ValueError):
    """Optimizer state does not match the parameters it is applied to."""


class FormatError(EgoMTLError, ValueError):
    """A binary file could not be parsed.

    ``offset`` is the byte position at which parsing failed.
    """

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class NonFiniteLossError(EgoMTLError, FloatingPointError):
    """Training produced a NaN or infinite loss."""
