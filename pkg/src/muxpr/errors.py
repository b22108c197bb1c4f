"""Exception hierarchy shared by all modules."""


class MuxprError(Exception):
    """Base class for every error raised by this package."""


class ConfigError(MuxprError, ValueError):
    """Invalid configuration or argument values."""


class DimensionError(ConfigError):
    pass


class WeightDegenerate(ConfigError):
    """Two source weights are closer than the allowed gap, so the sources are unidentifiable."""


class EmptyBackground(ConfigError):
    pass


class ZeroVector(ConfigError):
    pass


class ResourceError(MuxprError, MemoryError):
    pass


class NotHermitian(MuxprError, ArithmeticError):
    pass


class ConvergenceFailure(MuxprError, ArithmeticError):
    """An iterative eigensolver did not reach the residual target."""

    def __init__(self, message, iterations=None, worst_residual=None):
        super().__init__(message)
        self.iterations = iterations
        self.worst_residual = worst_residual


class DegenerateSpikeWarning(UserWarning):
    """Adjacent spike eigenvalues are numerically degenerate; their eigenvectors may be mixed."""
