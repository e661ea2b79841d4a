"""Exception types raised across the package."""


class DomainError(ValueError):
    """An argument lies outside the mathematical domain of an operation."""


class SupportError(ValueError):
    """A parameter lies outside the support of a prior."""


class InfiniteKLError(ValueError):
    """A divergence is infinite (zero prior mass on the posterior's support)."""


class InsufficientSpreadError(ValueError):
    """Every candidate was excluded by the excess-risk floor."""


class SamplingError(RuntimeError):
    """Rejection sampling exhausted its proposal budget."""

    def __init__(self, message, acceptance_rate=None):
        super().__init__(message)
        self.acceptance_rate = acceptance_rate


class DiagnosticsError(RuntimeError):
    """A Markov chain failed its acceptance-rate diagnostic."""

    def __init__(self, message, acceptance_rate=None):
        super().__init__(message)
        self.acceptance_rate = acceptance_rate


class OptimizationError(RuntimeError):
    """A variational fit increased its objective beyond tolerance."""

    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = list(trace or [])


class RateFitError(ValueError):
    """Too few positive points to fit a log-log rate."""
