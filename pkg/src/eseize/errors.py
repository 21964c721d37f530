"""Exception types shared across the package."""


class EseizeError(Exception):
    """Base class for all package errors."""


class InputError(EseizeError):
    """Bad user-supplied input: shapes, file formats, config values."""


class ContractViolation(EseizeError):
    """An internal API contract was broken (e.g. gradient for a frozen block)."""


class DegenerateGradientError(EseizeError):
    """A gradient norm is too small for a cosine to be meaningful."""


class DegenerateTraceError(EseizeError):
    """A metric trace is constant and cannot be normalized."""


class NotStabilizedError(EseizeError):
    """No stabilization point found within the trace."""


class DivergedError(EseizeError):
    """Training produced a non-finite loss."""
