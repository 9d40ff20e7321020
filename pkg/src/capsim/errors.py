"""Exception types shared across the package."""


class NumericDegeneracyError(ArithmeticError):
    """A denominator or eigenvalue gap fell below a safe tolerance."""


class DegenerateAlignmentError(RuntimeError):
    """Point-set alignment is rank deficient (collinear or coincident points)."""


class EmptyCorrespondenceError(RuntimeError):
    """Every candidate point pair was rejected by the correspondence cutoff."""


class SolverFailureError(RuntimeError):
    """No solver start converged; carries the best residual found."""

    def __init__(self, message, best_residual=None):
        super().__init__(message)
        self.best_residual = best_residual


class ConfigError(ValueError):
    """Scenario or module configuration is invalid."""
