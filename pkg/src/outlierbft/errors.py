"""Exception hierarchy.

Errors split into two families so the command line can map them to exit
codes: :class:`ConfigError` (bad arguments, configs, sweep specs) and
:class:`DataError` (anything wrong with measurements, files or models).
"""


class OutlierBFTError(Exception):
    """Base class for every error raised by this package."""


class ConfigError(OutlierBFTError, ValueError):
    """Invalid configuration, argument or sweep specification."""


class DataError(OutlierBFTError, ValueError):
    """Invalid or insufficient data."""


class MissingDeviceError(DataError):
    pass


class DuplicateDeviceError(DataError):
    pass


class DimensionMismatchError(DataError):
    pass


class NonFiniteError(DataError):
    pass


class UnknownDeviceError(DataError, KeyError):
    pass


class SlotOrderError(DataError):
    pass


class InsufficientDataError(DataError):
    pass


class DegenerateInputError(DataError):
    pass


class CsvFormatError(DataError):
    """Malformed matrix CSV; ``line`` is the 1-based physical line number."""

    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class LedgerError(OutlierBFTError):
    pass


class ChainIntegrityError(LedgerError):
    """Raised by chain verification; ``seq`` is the first bad block, if known."""

    def __init__(self, message, seq=None):
        self.seq = seq
        super().__init__(message if seq is None else f"block {seq}: {message}")


class EndorsementError(LedgerError):
    pass


class SafetyViolation(OutlierBFTError, AssertionError):
    """Two honest peers committed different digests for one sequence number."""
