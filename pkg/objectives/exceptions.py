from autodiff.exceptions import LabError


class ObjectiveError(LabError):
    """Invalid loss inputs (empty batch, mismatched draws, bad temperature)."""


class ReferenceModelError(ObjectiveError):
    """The reference model of a DCO loss is not frozen or does not match the fine-tuned model."""
