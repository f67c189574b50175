"""Exception hierarchy shared by all modules."""


class DiffSqueezeError(Exception):
    """Base class for every error raised by this package."""


class SizingError(DiffSqueezeError, ValueError):
    """Atom number, grid size or memory estimate outside the supported range."""


class SingularPointError(DiffSqueezeError, ValueError):
    """Error propagation requested where the fringe slope vanishes."""


class DegenerateDataError(DiffSqueezeError, ValueError):
    """Sample cannot determine the requested conic (singular scatter matrix)."""


class RejectedFitError(DiffSqueezeError):
    """Algebraic fit returned a conic that is not an ellipse."""

    def __init__(self, message, coefficients=None):
        super().__init__(message)
        self.coefficients = coefficients


class InvalidConicError(DiffSqueezeError, ValueError):
    """Conic coefficients do not admit a phase estimate (a <= 0 or c <= 0)."""


class OutOfRangeError(DiffSqueezeError, ValueError):
    """No admissible root / argument in [-1, 1]; carries the nearest candidate."""

    def __init__(self, message, nearest=None):
        super().__init__(message)
        self.nearest = nearest


class ConvergenceError(DiffSqueezeError, RuntimeError):
    """Quadrature or derivative self-consistency check failed."""


class ConfigError(DiffSqueezeError, ValueError):
    """Run configuration failed validation; ``errors`` lists every problem."""

    def __init__(self, errors):
        if isinstance(errors, str):
            errors = [errors]
        super().__init__("; ".join(errors))
        self.errors = list(errors)
