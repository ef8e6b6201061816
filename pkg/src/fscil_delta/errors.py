"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class DomainError(ValueError):
    """Input lies outside the domain of an operation (e.g. empty input)."""


class ContractError(ValueError):
    """A documented precondition was violated by the caller."""


class CapacityError(ValueError):
    """Not enough classes or samples to satisfy a request."""


class InvariantError(RuntimeError):
    """An internal invariant was found broken at runtime."""
