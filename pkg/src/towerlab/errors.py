"""Exception types raised across the package."""


class TowerlabError(Exception):
    """Base class for every error the library raises on purpose."""


class ConfigError(TowerlabError, ValueError):
    """Invalid parameters or experiment configuration."""


class OutOfBranchImage(TowerlabError, ValueError):
    """A target point is not in the image of the requested inverse branch."""


class TruncationTooCoarse(TowerlabError):
    """Too much base mass is left in unresolved cells; raise max_time."""


class DepthTooSmall(TowerlabError):
    """A truncated infinite product has not converged at the requested depth."""


class PeriodicTower(TowerlabError):
    """The return times share a common factor greater than one."""


class ProbeTooShort(TowerlabError):
    """The return-mass sequence has not settled within the probe window."""


class HorizonExceeded(TowerlabError):
    """A coupling run hit its horizon before the simultaneous return.

    The partial record is attached as ``record`` so callers can count the
    sample as censored.
    """

    def __init__(self, message, record=None):
        super().__init__(message)
        self.record = record


class InsufficientSamples(TowerlabError):
    """A conditional-frequency bin has fewer observations than required."""


class CellBudgetExceeded(TowerlabError):
    """Exact cylinder enumeration would exceed the configured cell budget."""


class ExtractionNegative(TowerlabError):
    """The extraction fraction is too large and would produce a negative density."""


class SeriesTooShort(TowerlabError):
    """The orbit is too short for the requested lags."""


class NonpositiveValues(TowerlabError, ValueError):
    """A log-log fit window contains zero or negative values."""


class DegenerateVariance(TowerlabError):
    """The estimated asymptotic variance is numerically zero."""
