"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Array dimensions do not agree with what an operation requires."""


class ValidationError(ValueError):
    """An argument is well-shaped but its value is not allowed."""


class ConfigError(ValueError):
    """A configuration document or preset is inconsistent."""


class FormatError(ValueError):
    """A file does not follow the expected on-disk layout."""


class TruncatedFileError(FormatError, OSError):
    """A file ended before the payload its header promised."""


class UsageError(RuntimeError):
    """An API was called out of order, e.g. with a stale forward cache."""


class DegeneracyError(ValueError):
    """Geometry is too degenerate for the requested fit."""


class PipelineError(RuntimeError):
    """A pipeline stage is missing the output of an earlier stage."""

    def __init__(self, stage, missing):
        self.stage = stage
        self.missing = missing
        super().__init__(f"stage '{stage}' has not been run: missing {missing}")
