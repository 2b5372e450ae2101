"""Exception types shared across the package."""


class ConfigError(ValueError):
    """Invalid or inconsistent configuration."""


class NumericalError(ArithmeticError):
    """A loss or output became non-finite."""


class LeakageError(ConfigError):
    """Evaluation data overlaps training data where the protocol forbids it."""
