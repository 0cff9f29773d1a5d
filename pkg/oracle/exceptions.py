from autodiff.exceptions import LabError


class OracleError(LabError):
    """Closed-form computation impossible for the given inputs (e.g. not positive-definite)."""


class WorldError(LabError):
    """Invalid Gaussian concept world."""

    def __init__(self, message, errors=None):
        super().__init__(message)
        self.errors = errors or {}
