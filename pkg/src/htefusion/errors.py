"""Exception types shared across the package."""


class ValidationError(ValueError):
    """Unusable input: malformed data, inconsistent shapes, or bad options."""


class NumericalError(RuntimeError):
    """A numerical routine failed: non-convergence or a singular system."""
