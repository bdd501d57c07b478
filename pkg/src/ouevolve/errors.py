"""Exception hierarchy shared by all modules."""


class OUError(Exception):
    """Base class for every error raised by the package."""


class DomainError(OUError, ValueError):
    """A time argument falls outside the model's time domain."""


class NonSymmetricQ(OUError, ValueError):
    """The diffusion matrix is not symmetric within tolerance."""


class StepFailure(OUError, RuntimeError):
    """Adaptive integration could not meet the requested tolerance."""


class InsufficientSamples(OUError, ValueError):
    pass


class SingularCovariance(OUError, ValueError):
    pass


class QuadratureOverflow(OUError, OverflowError):
    """Tensor rule too large, or the integrand overflows on the outer nodes."""


class OddMomentUnsupported(OUError, ValueError):
    pass


class EvaluationFailure(OUError, FloatingPointError):
    """A field evaluation produced a non-finite value.

    The offending point is kept in ``witness``.
    """

    def __init__(self, message, witness=None):
        super().__init__(message)
        self.witness = witness


class MissingDerivatives(OUError, ValueError):
    pass


class SingularityBudgetExceeded(OUError, RuntimeError):
    pass


class InconclusiveFit(OUError, RuntimeError):
    """A rate fit did not reach the required r^2. Carries the fit in ``fit``."""

    def __init__(self, message, fit=None):
        super().__init__(message)
        self.fit = fit


class NoExpandingDirection(OUError, ValueError):
    pass


class ConfigError(OUError, ValueError):
    """Invalid run configuration. ``field`` names the offending entry."""

    def __init__(self, message, field=None):
        super().__init__(message if field is None else f"{field}: {message}")
        self.field = field
