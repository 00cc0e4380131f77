"""Exception hierarchy shared by the solver modules."""


class DelayBsdeError(Exception):
    """Base class for all errors raised by this package."""


class DomainError(DelayBsdeError, ValueError):
    """An argument lies outside the mathematical domain of an operation."""


class ConfigurationError(DelayBsdeError, ValueError):
    """Inconsistent discretisation or solver settings."""


class SimulationError(DelayBsdeError, RuntimeError):
    """A forward simulation produced non-finite values."""


class IllConditionedRegressionError(DelayBsdeError, RuntimeError):
    """The normal equations of a regression step are numerically singular."""

    def __init__(self, step, condition):
        super().__init__(
            f"regression at step {step} is ill-conditioned (cond={condition:.3e})"
        )
        self.step = step
        self.condition = condition


class StepSizeError(DelayBsdeError, RuntimeError):
    """The time step is too coarse for the implicit inner iteration."""


class NonConvergenceError(DelayBsdeError, RuntimeError):
    """The Picard loop hit its iteration cap; the trace is attached."""

    def __init__(self, message, trace):
        super().__init__(message)
        self.trace = trace


class ContractionError(DelayBsdeError, RuntimeError):
    """The delay-smallness condition failed under the ``abort`` policy."""

    def __init__(self, report):
        super().__init__(
            f"contraction condition violated: lhs={report.lhs:.6g} "
            f">= threshold={report.threshold:.6g}"
        )
        self.report = report


class StateError(DelayBsdeError, RuntimeError):
    """An object lacks the state needed for the requested operation."""


class ResourceError(DelayBsdeError, RuntimeError):
    """A request would exceed the enumeration limits of an oracle."""


class SingularVolatilityError(DelayBsdeError, RuntimeError):
    """A volatility evaluation fell below the invertibility floor."""
