"""Exception types shared across the package."""


class DomainError(ValueError):
    """A geometric quantity was requested outside its domain of definition."""


class NumericalError(ArithmeticError):
    """A linear system stayed singular after regularization."""


class ConfigError(ValueError):
    """An experiment or estimator configuration is invalid."""
