class CbtError(Exception):
    """Base class for all errors raised by this package."""


class ValidationError(CbtError, ValueError):
    """Invalid argument or configuration value."""


class ShapeError(ValidationError):
    """Array or parameter shapes do not agree."""


class FormatError(CbtError, ValueError):
    """A file on disk is malformed."""


class DegenerateError(CbtError, ValueError):
    """Input is valid in shape but makes the computation undefined."""


class ConfigError(ValidationError):
    """A run configuration key is unknown, mistyped or out of bounds."""


class StageError(CbtError):
    """Pipeline failure tagged with the stage that raised it."""

    def __init__(self, stage, message):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage


class ComparisonError(CbtError, ValueError):
    """Runs being compared do not share a dataset or a layout."""
