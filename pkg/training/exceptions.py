from autodiff.exceptions import LabError


class TrainingError(LabError):
    """Invalid training setup (bad config, empty reference or prior set)."""


class TrainingDivergedError(TrainingError):
    """A loss or a gradient became non-finite."""

    def __init__(self, message, step=None, loss=None):
        super().__init__(message)
        self.step = step
        self.loss = loss


class FrozenModelError(TrainingError):
    """Something tried to update a frozen model's parameters."""
