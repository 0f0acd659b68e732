"""Exception types shared across the package."""


class SconceError(Exception):
    """Base class for all errors raised by this package."""


class UnsupportedOrderError(SconceError):
    """Requested a derivative order outside the exactly-supported range."""


class GridMismatchError(SconceError):
    """Two grid-indexed objects do not live on the same time grid."""


class DivergenceError(SconceError):
    """A trajectory left the finite range allowed by the solver.

    Carries the step index at which the state first became non-finite
    or exceeded the divergence guard.
    """

    def __init__(self, message: str, step: int):
        super().__init__(message)
        self.step = step


class DegenerateSampleError(SconceError):
    """Sample set too degenerate for the requested estimator."""


class ConfigError(SconceError):
    """Invalid run configuration; carries every validation message."""

    def __init__(self, messages):
        self.messages = list(messages)
        super().__init__("; ".join(self.messages))
