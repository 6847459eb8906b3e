"""Exception hierarchy for duohand.

Every error raised on purpose by the package derives from ``DuohandError``.
The three families below map one-to-one onto CLI exit codes.
"""

from typing import Any, Optional


class DuohandError(Exception):
    """Base class for all duohand errors."""

    exit_code = 1


class ConfigError(DuohandError):
    """A configuration value, flag or run combination is not acceptable."""

    exit_code = 2

    def __init__(self, message: str, field: Optional[str] = None):
        self.field = field
        super().__init__(f"{field}: {message}" if field else message)


class OverwriteRefusedError(ConfigError):
    """An output already exists and ``--force`` was not given."""


class IncompatibleCheckpointError(ConfigError):
    """The checkpoint was written under a different configuration."""


class IncomparableRunsError(ConfigError):
    """Runs evaluated on different datasets were asked to share a table."""


class DataError(DuohandError):
    """A file could not be read, or its contents do not check out."""

    exit_code = 3


class ContainerIOError(DataError):
    """The underlying read or write failed."""


class FormatError(DataError):
    """The file is not a duohand container of the expected kind."""


class VersionMismatchError(DataError):
    """The container was written by an incompatible format version."""


class ChecksumError(DataError):
    """The container is truncated or its payload does not match its digest."""


class TemplateMismatchError(DataError):
    """Checkpoint and dataset were built for different hand templates."""


class ManifestHashError(DataError):
    """An artifact listed in a run manifest no longer matches its hash."""


class NumericalError(DuohandError):
    """A computation received or produced numerically invalid values."""

    exit_code = 4


class InvalidInputError(NumericalError):
    """Joint data is malformed (wrong shape, non-finite, misaligned wrist)."""


class InvalidParameterError(NumericalError):
    """A hyper-parameter lies outside its admissible range."""


class DegenerateConfigurationError(NumericalError):
    """The joints do not determine a rotation (collinear or coincident)."""


class DegenerateMeanError(NumericalError):
    """The averaged rotation matrix is rank deficient."""


class InitializationError(NumericalError):
    """No usable prediction pair was available to initialize the rotation."""


class NonFiniteLossError(NumericalError):
    """The adaptation loss became NaN or infinite.

    The adaptation state at the failing iteration is attached as ``state`` so
    it can be dumped for inspection.
    """

    def __init__(self, message: str, state: Any = None):
        self.state = state
        super().__init__(message)
