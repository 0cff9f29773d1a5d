from autodiff.exceptions import LabError


class ConfigError(LabError):
    """Malformed experiment config; ``line`` is the 1-based YAML line when known."""

    def __init__(self, message, line=None, errors=None):
        super().__init__(message)
        self.line = line
        self.errors = errors or {}


class ArtifactError(LabError):
    """A checkpoint, adapter or report file is missing or does not fit the experiment."""


class ReportError(LabError):
    """Point sets too small or degenerate to summarise."""
