class LabError(Exception):
    """Base class for every error raised by the laboratory apps."""


class ShapeError(LabError):
    """Operand shapes do not conform."""


class NonFiniteError(LabError):
    """A value or an operation result contains NaN or Inf."""


class TapeError(LabError):
    """Misuse of a gradient tape (consumed, inactive, unrecorded loss)."""
