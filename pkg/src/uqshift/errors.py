"""Exception hierarchy shared by all uqshift modules."""


class UqShiftError(Exception):
    """Base class for every error raised by the toolkit."""


class InvalidMeasurement(UqShiftError, ValueError):
    pass


class InsufficientData(UqShiftError, ValueError):
    pass


class InvalidSetting(UqShiftError, ValueError):
    pass


class InvalidParams(UqShiftError, ValueError):
    pass


class DimensionError(UqShiftError, ValueError):
    pass


class NumericalError(UqShiftError, ArithmeticError):
    pass


class ContractViolation(UqShiftError, ValueError):
    pass


class CalibrationError(UqShiftError, ValueError):
    pass


class UndefinedMetric(UqShiftError, ValueError):
    pass


class ConfigError(UqShiftError, ValueError):
    pass


class ParseError(UqShiftError, ValueError):
    """A malformed dataset row.

    Carries the 1-based line number of the offending row (the header is
    line 1).
    """

    def __init__(self, line, reason):
        self.line = line
        self.reason = reason
        super().__init__(f"line {line}: {reason}")


class SearchFailed(UqShiftError, RuntimeError):
    """Every grid-search candidate failed; ``causes`` maps index to error."""

    def __init__(self, causes):
        self.causes = dict(causes)
        detail = "; ".join(f"#{i}: {e!r}" for i, e in self.causes.items())
        super().__init__(f"all {len(self.causes)} candidates failed ({detail})")


class EnsembleError(UqShiftError, RuntimeError):
    def __init__(self, failures):
        self.failures = dict(failures)
        members = ", ".join(str(i) for i in sorted(self.failures))
        super().__init__(f"ensemble members failed: {members}")
