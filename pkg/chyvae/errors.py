from typing import Optional


class ChyvaeError(Exception):
    """
    Base class for every error raised by chyvae.

    Each error carries a short machine-readable code, a human-readable
    description and the process exit code the CLI reports for it.
    """

    error_code = "chyvae_error"
    exit_code = 1

    def __init__(self, description: str, error_code: Optional[str] = None):
        super().__init__(description)
        self.description = description
        if error_code is not None:
            self.error_code = error_code

    def get_error_code(self) -> str:
        return self.error_code

    def get_error_description(self) -> str:
        return self.description

    def get_exit_code(self) -> int:
        return self.exit_code


class NotPositiveDefinite(ChyvaeError):
    """A Cholesky pivot was not strictly positive."""

    error_code = "not_positive_definite"


class DomainError(ChyvaeError, ValueError):
    """An argument lies outside the domain of the function."""

    error_code = "domain_error"


class DimensionMismatch(ChyvaeError, ValueError):
    """Operand shapes do not agree."""

    error_code = "dimension_mismatch"


class NotScalar(ChyvaeError):
    """backward() was called on a tensor with more than one element."""

    error_code = "not_scalar"


class NonFiniteGradient(ChyvaeError):
    """A gradient contained NaN or Inf; the optimizer step was aborted."""

    error_code = "non_finite_gradient"
    exit_code = 3


class FormatError(ChyvaeError):
    """A dataset or checkpoint file has a bad magic, version or length."""

    error_code = "format_error"


class IoError(ChyvaeError):
    """Reading or writing a file failed."""

    error_code = "io_error"


class ConfigurationError(ChyvaeError, ValueError):
    """A configuration value is missing or invalid."""

    error_code = "configuration_error"
    exit_code = 2
