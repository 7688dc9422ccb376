"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes: usage/config errors -> 1,
data errors -> 2, training contract errors -> 3.
"""


class MeltpoolError(Exception):
    """Base class for all package errors."""


class DimensionError(MeltpoolError):
    """Shape mismatch; message names the offending axis."""


class ContractError(MeltpoolError):
    """A documented precondition was violated by the caller."""


class DegenerateBatchError(ContractError):
    """Batch too small for batch statistics (train-mode batchnorm needs N >= 2)."""


class DataError(MeltpoolError):
    """Problem with data on disk or dataset contents."""


class IngestionError(DataError):
    """Unreadable or wrong-format input file; message names the file."""


class CheckpointError(DataError):
    """Malformed, truncated, or version-incompatible checkpoint file."""


class ConfigError(MeltpoolError):
    """Invalid configuration file or flag combination."""
