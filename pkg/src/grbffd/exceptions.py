"""Exception types raised by the library."""


class GrbffdError(Exception):
    """Base class for all library errors."""


class ConfigurationError(GrbffdError, ValueError):
    """Invalid manifold name, method configuration or run configuration."""


class UnsupportedModeError(GrbffdError, ValueError):
    """A sampling mode that the requested manifold does not define."""


class DegenerateStencilError(GrbffdError, ArithmeticError):
    """A stencil whose projected coordinates cannot support the fit.

    ``index`` is the base point of the offending stencil, or ``None`` when
    the stencil is not attached to a point cloud.
    """

    def __init__(self, message, index=None):
        super().__init__(message)
        self.index = index


class RankDeficiencyError(DegenerateStencilError):
    """The weighted Gram matrix of the Vandermonde matrix is numerically singular."""


class SolverError(GrbffdError, RuntimeError):
    """Linear or eigenvalue iteration failed; ``residual`` holds the best value reached."""

    def __init__(self, message, residual=None):
        super().__init__(message)
        self.residual = residual


class OracleUndefinedError(GrbffdError, ArithmeticError):
    """The finite-difference oracle was asked to evaluate at a degenerate metric."""
