"""Exception types shared across the package."""


class LISError(Exception):
    """Base class for errors raised by lisbayes."""


class ContractError(LISError, ValueError):
    """Input violates a documented precondition (shape, range, ...)."""


class DegenerateEnsembleError(LISError):
    """All importance weights vanish, so no normalized weighting exists."""


class NumericalError(LISError, ArithmeticError):
    """A model evaluation produced a non-finite value where one is required."""


class ConfigError(LISError, ValueError):
    """Experiment configuration is malformed."""

    def __init__(self, key, message):
        self.key = key
        super().__init__(f"{key}: {message}")
