"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes: ``FormatError`` and ``OSError`` are I/O
failures (exit 2), everything else derived from ``HeartError`` is a contract
failure (exit 1).
"""


class HeartError(Exception):
    """Base class for all package errors."""


class ContractError(HeartError):
    """A precondition of a public operation was violated."""


class NumericError(HeartError):
    """A computation produced a non-finite value."""


class ConfigError(ContractError):
    pass


class GateError(ContractError):
    pass


class RefError(ContractError):
    pass


class DataError(ContractError):
    pass


class SizeError(ContractError):
    pass


class DegenerateInputError(ContractError):
    pass


class FormatError(HeartError):
    """Malformed on-disk artifact (checkpoint, dataset, policy text)."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class DivergenceError(NumericError):
    def __init__(self, message, last_good=None):
        super().__init__(message)
        self.last_good = last_good
