"""Exception types shared across the package."""


class UnifyEditError(Exception):
    pass


class ShapeError(UnifyEditError, ValueError):
    pass


class RangeError(UnifyEditError, ValueError):
    pass


class DomainError(UnifyEditError, ValueError):
    pass


class ConfigError(UnifyEditError, ValueError):
    pass


class ValidationError(UnifyEditError, ValueError):
    pass


class DegenerateMaskError(ValidationError):
    pass


class SpecError(ValidationError):
    pass


class JoinError(UnifyEditError, KeyError):
    pass


class ManifestError(ValidationError):
    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class DivergenceError(UnifyEditError, ArithmeticError):
    """Raised when an optimized latent stops being finite."""

    def __init__(self, t, iteration, detail=""):
        self.t = t
        self.iteration = iteration
        msg = f"non-finite latent at t={t}, iteration={iteration}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)
