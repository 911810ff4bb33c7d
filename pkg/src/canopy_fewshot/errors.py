"""Exception hierarchy. Everything the CLI maps to exit code 2 derives from ValidationError."""


class CanopyError(Exception):
    pass


class ValidationError(CanopyError, ValueError):
    pass


class IngestionError(ValidationError):
    """A tile listed in a manifest could not be read."""


class NormalizationError(ValidationError):
    pass


class ShapeError(ValidationError):
    pass


class ParameterError(ValidationError):
    """An argument is outside its allowed range."""
