from autodiff.exceptions import LabError


class AdapterError(LabError):
    """Adapter shapes, layer sets or tokens that do not fit the model they are used with."""
