"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operands have incompatible or unexpected dimensions."""


class ParameterError(ValueError):
    """A configuration or argument value is outside its documented bounds."""


class DomainError(ValueError):
    """An input violates a numeric precondition (e.g. transmission below floor)."""


class FormatError(ValueError):
    """A file does not conform to the expected on-disk format."""


class NumericError(RuntimeError):
    """A computation produced non-finite values and was aborted."""


class ValidationError(ValueError):
    """A config file failed validation; message names the offending field path."""
