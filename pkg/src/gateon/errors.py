"""Exception types shared across the package."""


class ContractViolation(ValueError):
    """A caller broke an operation's precondition (shape, range, state)."""


class IdxFormatError(ValueError):
    """Base class for malformed IDX files."""


class BadMagicError(IdxFormatError):
    pass


class TruncatedFileError(IdxFormatError):
    pass


class CountMismatchError(IdxFormatError):
    pass


class InvalidLabelError(IdxFormatError):
    pass


class NonFiniteLossError(RuntimeError):
    """Training produced NaN/Inf; the run is aborted."""
