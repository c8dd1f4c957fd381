"""Exception types shared across the package."""


class MLTPError(Exception):
    """Base class for all errors raised by this package."""


class InvalidInputError(MLTPError, ValueError):
    """An operation received arguments that violate its preconditions."""


class PrecisionError(InvalidInputError):
    """Operands of a single op do not share a floating precision."""


class OracleError(MLTPError):
    """A finite-difference oracle evaluated to a non-finite value."""


class IngestionError(MLTPError, ValueError):
    """A dataset file is malformed."""


class ConfigError(MLTPError, ValueError):
    """An experiment configuration is invalid."""


class NumericError(MLTPError, FloatingPointError):
    """Training produced a non-finite loss or gradient."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = dict(diagnostics or {})
