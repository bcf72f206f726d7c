"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class ContractError(RuntimeError):
    """An operation was called in a state that violates its preconditions."""


class DomainError(ValueError):
    """An argument lies outside the domain of a function."""


class SingularityError(DomainError):
    """A quantity is undefined at the requested point (e.g. the score at t = 0)."""


class ConfigError(ValueError):
    """Invalid configuration. ``fields`` lists the offending keys."""

    def __init__(self, message, fields=()):
        super().__init__(message)
        self.fields = tuple(fields)


class DivergenceError(RuntimeError):
    """Training produced non-finite parameters."""

    def __init__(self, message, record=None):
        super().__init__(message)
        self.record = record or {}
