"""Exception hierarchy shared by the library and the CLI.

Each family carries the process exit code the CLI maps it to.
"""


class SeqAlignError(Exception):
    exit_code = 1


class ConfigError(SeqAlignError):
    exit_code = 2


class DataError(SeqAlignError):
    exit_code = 3
    code = "data_error"


class BadMagicError(DataError):
    code = "bad_magic"


class VersionMismatchError(DataError):
    code = "version_mismatch"


class TruncatedPayloadError(DataError):
    code = "truncated_payload"


class DimMismatchError(DataError):
    code = "dim_mismatch"


class NumericalError(SeqAlignError):
    exit_code = 4


class ContractError(ValueError):
    """A documented precondition of an operation was violated."""


class DimensionError(ValueError):
    """Operand shapes are incompatible."""
