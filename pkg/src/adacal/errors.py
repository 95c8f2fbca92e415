"""Exception types shared across the package."""


class AdacalError(Exception):
    """Base class for all errors raised by this package."""


class CaldFormatError(AdacalError):
    """Raised when a CALD file is structurally invalid.

    Covers bad magic, unsupported version, and truncated payloads.
    """


class DatasetValidationError(AdacalError):
    """Raised when dataset contents violate an invariant.

    Covers shape mismatches, out-of-range labels, non-finite values and
    degenerate dimensions. The message names the first offending sample
    where one exists.
    """


class ModelFormatError(AdacalError):
    """Raised when a serialized model file cannot be parsed or has the
    wrong kind/version."""


class ManifestError(AdacalError):
    """Raised when a sweep manifest is malformed.

    Covers missing fields, out-of-range severities and empty names; file
    I/O problems surface as OSError instead.
    """


class TrainingDivergedError(AdacalError):
    """Raised when a training loss becomes non-finite.

    The message names the epoch and batch where divergence was detected.
    """
