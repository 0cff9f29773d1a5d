from autodiff.exceptions import LabError


class ScheduleError(LabError):
    """Bad schedule name or time outside [0, 1]."""


class UnknownConditionError(LabError):
    """A condition id that the model's condition table does not contain."""


class CheckpointError(LabError):
    """Unreadable, corrupted or incompatible checkpoint container."""


class ModelSpecError(LabError):
    """A model spec or condition table that cannot describe a network."""
