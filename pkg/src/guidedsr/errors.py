"""Exception hierarchy shared by all modules.

Each class carries the CLI exit code it maps to.
"""


class GuidedSRError(Exception):
    exit_code = 1


class ConfigurationError(GuidedSRError, ValueError):
    """Shapes, channel counts or settings that cannot work together."""

    exit_code = 2


class DomainError(GuidedSRError, ValueError):
    """A scalar argument lies outside the domain of a formula."""

    exit_code = 2


class PlanningError(ConfigurationError):
    """A cascade plan whose stages are not strictly increasing."""


class DataError(GuidedSRError, ValueError):
    exit_code = 3


class FormatError(DataError):
    """A file on disk does not match its declared layout."""


class NumericalError(GuidedSRError, ArithmeticError):
    """NaN/Inf appeared in a forward pass, gradient or loss."""

    exit_code = 4
