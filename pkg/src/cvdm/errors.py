"""Exception types shared across the package."""


class DomainError(ValueError):
    """An argument lies outside the mathematical domain of an operation."""


class SingularityError(ArithmeticError):
    """A quantity hit a configured floor that would make a division blow up."""


class NonFiniteError(RuntimeError):
    """A NaN or infinity appeared where finite values are required."""
