"""
Exception types raised across proto_rectify.

The CLI maps each family onto a process exit code (see `EXIT_CODES`).
"""


class ConfigurationError(ValueError):
    """Invalid settings, sizes or thresholds."""


class ShapeMismatchError(ValueError):
    """Arrays that must agree in shape do not."""


class DataError(ValueError):
    """Input data is missing, malformed or inconsistent."""


class CorruptFileError(DataError):
    """A stored volume or checkpoint does not match its manifest."""


class ContractViolation(RuntimeError):
    """An operation was called outside of its documented contract."""


class NumericalError(RuntimeError):
    """A loss or parameter became non-finite."""


EXIT_CODES: dict[type[Exception], int] = {
    ConfigurationError: 2,
    DataError: 3,
    NumericalError: 4,
}


def exit_code_for(error: Exception) -> int:
    for error_type, code in EXIT_CODES.items():
        if isinstance(error, error_type):
            return code
    return 1
