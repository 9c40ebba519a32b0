"""Exception hierarchy shared across the package.

The CLI maps these onto process exit codes, so every failure that can reach a
user is one of these classes.
"""


class MnmtError(Exception):
    """Base class for all package errors."""

    exit_code = 1


class ConfigError(MnmtError, ValueError):
    exit_code = 2


class DataError(MnmtError, ValueError):
    exit_code = 3


class ParseError(DataError):
    """Malformed input row; ``lineno`` is 1-based."""

    def __init__(self, path, lineno, message):
        self.path = str(path)
        self.lineno = lineno
        super().__init__(f"{self.path}:{lineno}: {message}")


class NumericError(MnmtError, ArithmeticError):
    exit_code = 4


class ResumeMismatchError(MnmtError):
    exit_code = 5


class ContractError(MnmtError, ValueError):
    """A caller violated an operation precondition."""

    exit_code = 2


class DimensionError(ContractError):
    pass


class CheckpointFormatError(DataError):
    pass


class CheckpointCorruptError(DataError):
    pass
