"""Exception hierarchy shared across the package."""


class SpecfitError(Exception):
    """Base class for all package errors."""


class ParseError(SpecfitError):
    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class AxisError(SpecfitError):
    pass


class FormatError(SpecfitError):
    def __init__(self, message, key=None):
        super().__init__(message)
        self.key = key


class EmptyWindowError(SpecfitError):
    pass


class CatalogError(SpecfitError):
    pass


class DomainError(SpecfitError, ValueError):
    pass


class ShiftBoundError(DomainError):
    pass


class SingularityError(SpecfitError):
    pass


class ConfigError(SpecfitError):
    pass
