"""Exception types shared across the package."""

import numpy as np


class ConfigurationError(ValueError):
    """Invalid model, problem or run configuration."""


class IntegrationBlowupError(FloatingPointError):
    """A stochastic integration step produced a non-finite state."""

    def __init__(self, message, state=None):
        super().__init__(message)
        self.state = None if state is None else np.array(state, dtype=float)


class FilterDivergenceError(ArithmeticError):
    """The Riccati covariance lost positive definiteness."""

    def __init__(self, message, covariance=None):
        super().__init__(message)
        self.covariance = covariance
