"""Exception types raised across the package."""


class InvalidInputError(ValueError):
    """Argument has the wrong shape, a non-finite entry, or violates a precondition."""


class NumericError(ArithmeticError):
    """A numerical routine failed (loss of positivity, indefinite quadratic, ...)."""


class InstabilityError(NumericError):
    """A closed-loop simulation diverged past the configured abort threshold."""

    def __init__(self, message, t=None, state_norm=None, threshold=None):
        super().__init__(message)
        self.t = t
        self.state_norm = state_norm
        self.threshold = threshold


class IdentifiabilityError(NumericError):
    """The least-squares design is too poorly conditioned to recover the Markov operator."""

    def __init__(self, message, sigma_min=None):
        super().__init__(message)
        self.sigma_min = sigma_min
