"""Exception types raised across the package."""


class CertiformerError(Exception):
    """Base class for all errors raised by certiformer."""


class DomainViolation(CertiformerError, ValueError):
    """An interval lies outside the domain of the function being bounded."""


class RangeOverflow(CertiformerError, ArithmeticError):
    """A bound would overflow float64 (e.g. exp of a very large upper bound)."""


class ShapeError(CertiformerError, ValueError):
    pass


class FormatError(CertiformerError, ValueError):
    pass


class VersionError(CertiformerError, ValueError):
    pass


class UnsupportedShape(CertiformerError, ValueError):
    pass


class UnknownToken(CertiformerError, KeyError):
    pass


class EmptyInput(CertiformerError, ValueError):
    pass


class Misclassified(CertiformerError):
    """The clean input is not classified as the requested label."""

    def __init__(self, predicted: int, label: int):
        super().__init__(f"clean input predicted as {predicted}, expected {label}")
        self.predicted = predicted
        self.label = label


class ConfigError(CertiformerError, ValueError):
    pass
