"""Exception types shared across the package."""


class ConfigError(ValueError):
    """Invalid configuration file or parameter set."""


class InconsistentRegionError(ValueError):
    """Region markers violate the nested-region geometry contract."""


class ConstraintViolationError(ValueError):
    """A cavity shape violates the admissible-geometry constraints."""


class DisconnectedDomainError(ValueError):
    """Removing cavity cells split the computational domain."""


class NotSpdError(RuntimeError):
    """The linear system handed to the SPD solver is not positive definite."""


class NoConvergenceError(RuntimeError):
    """An iterative solver exhausted its budget.

    Carries a ``diagnostics`` dict (final residual, iteration count, ...).
    """

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = dict(diagnostics or {})


class StagnationError(RuntimeError):
    """Line search could not find a decrease above the minimum step."""
