"""Exception types shared across the package.

Each class carries the CLI exit code it maps to, so command handlers can
translate failures without a lookup table.
"""


class FtlabError(Exception):
    exit_code = 1


class ShapeError(FtlabError, ValueError):
    exit_code = 2


class ContractError(FtlabError, ValueError):
    """A precondition of an operation was violated by the caller."""

    exit_code = 2


class ConfigError(FtlabError, ValueError):
    exit_code = 2


class CheckpointError(FtlabError, KeyError):
    """A parameter the model needs is missing from the supplied set."""

    exit_code = 4

    def __str__(self):
        return Exception.__str__(self)


class DataError(FtlabError, ValueError):
    exit_code = 3


class FormatError(FtlabError, ValueError):
    """Raised when a checkpoint file cannot be decoded."""

    exit_code = 4

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset
