"""Exception hierarchy shared by every subsystem.

The CLI maps these onto exit codes: configuration problems exit with 2,
data and file problems with 3, numeric aborts with 4.
"""


class DewpError(Exception):
    """Base class for all package errors."""


class DimensionError(DewpError, ValueError):
    """Operand shapes are incompatible."""


class ContractError(DewpError, RuntimeError):
    """A precondition of an operation was violated by the caller."""


class ConfigError(DewpError, ValueError):
    """Invalid or inconsistent configuration."""


class DataError(DewpError):
    """Input data is malformed or unusable."""


class DataFormatError(DataError, ValueError):
    """A file could not be parsed."""


class SchemaError(DataFormatError):
    """A required column is missing from an input file."""


class PlanningError(DataError):
    """Not enough history to build the requested forecast windows."""


class CompatibilityError(DataError):
    """Two artifacts were produced under incompatible settings."""


class CheckpointError(DataError):
    """Base class for failures while loading a serialized artifact."""


class ChecksumError(CheckpointError):
    pass


class VersionError(CheckpointError):
    pass


class TruncatedFileError(CheckpointError):
    pass


class ConfigMismatchError(CheckpointError):
    pass


class NumericAbort(DewpError, FloatingPointError):
    """Training produced a non-finite loss, parameter or gradient."""
