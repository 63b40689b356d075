"""Exception hierarchy for blpbounds."""


class BlpBoundsError(Exception):
    """Base class for all blpbounds errors."""


class DataError(BlpBoundsError):
    """Invalid or inconsistent input data."""


class QuadratureError(BlpBoundsError):
    """Invalid mixing or quadrature specification."""


class InversionError(BlpBoundsError):
    """Share inversion did not converge or received invalid shares."""

    def __init__(self, message, residual=None, iterations=None):
        super().__init__(message)
        self.residual = residual
        self.iterations = iterations


class DegenerateShareError(BlpBoundsError):
    """A share integral underflowed to (numerical) zero."""


class SingularityError(BlpBoundsError):
    """An equilibrium-object formula hit a zero denominator."""


class InfeasibleSampleError(BlpBoundsError):
    """Sample too small for the requested self-normalized critical value."""


class ConfigError(BlpBoundsError):
    """Invalid run configuration."""
