"""Exception types shared across the simulator."""


class InferSimError(Exception):
    """Base class for all simulator errors."""


class ValidationError(InferSimError):
    """Malformed input data or out-of-range parameters."""


class ConfigurationError(InferSimError):
    """Inconsistent or incomplete configuration (unknown VM type, empty catalog, ...)."""


class TraceParseError(ValidationError):
    """A trace file line could not be parsed; carries the offending line number."""

    def __init__(self, path, line_no: int, message: str):
        super().__init__(f"{path}:{line_no}: {message}")
        self.path = str(path)
        self.line_no = line_no


class InfeasibleError(InferSimError):
    """No resource configuration can meet the requested latency budget.

    ``fastest_ms`` reports the best achievable latency so callers can decide
    how far off the budget was.
    """

    def __init__(self, message: str, fastest_ms: float | None = None):
        super().__init__(message)
        self.fastest_ms = fastest_ms


class ComparisonError(InferSimError):
    """Reports being compared do not come from the same trace setup."""


class VerificationError(InferSimError):
    """A report cannot be replay-verified (e.g. ledger missing)."""
