"""Exception hierarchy shared across the package.

Exit-code mapping used by the CLI: ConfigError -> 2, DataError -> 3,
NumericFailure (incl. DivergedSimulation) -> 4.
"""


class PderollError(Exception):
    """Base class for all package errors."""


class ConfigError(PderollError):
    """Invalid or unknown configuration key / value / flag."""


class DataError(PderollError):
    """Bad or missing on-disk data (manifests, trajectory files, checkpoints)."""


class DegenerateChannelError(DataError):
    """A channel has (near-)zero variance and cannot be normalized."""


class NumericFailure(PderollError):
    """Non-finite values showed up where finite ones are required."""


class DivergedSimulation(NumericFailure):
    """A reference simulation produced non-finite values.

    Carries the index of the first bad frame when known.
    """

    def __init__(self, message, frame=None):
        super().__init__(message)
        self.frame = frame
