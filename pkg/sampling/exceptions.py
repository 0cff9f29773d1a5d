from autodiff.exceptions import LabError


class SamplerError(LabError):
    """Invalid time grid or a step the sampler cannot take."""


class GuidanceError(LabError):
    """Invalid guidance scales or predictors that cannot be combined."""
