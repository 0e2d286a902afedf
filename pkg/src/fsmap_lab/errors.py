"""Exception types shared across the package."""

from __future__ import annotations


class DimensionError(ValueError):
    """An input array does not have the shape the operation requires."""


class DomainError(ValueError):
    """An argument lies outside the mathematical domain of the operation."""


class NonFiniteError(FloatingPointError):
    """A computation produced NaN or infinity.

    ``where`` identifies the offending stage (a layer index for model
    passes, a step index for training loops).
    """

    def __init__(self, message: str, where: int):
        super().__init__(f"{message} (at index {where})")
        self.where = int(where)


class SingularGramError(ArithmeticError):
    """A Gram matrix is singular where a nonsingular one is required.

    ``null_count`` is the number of null directions detected.
    """

    def __init__(self, null_count: int):
        super().__init__(
            f"Gram matrix is singular: {int(null_count)} null direction(s); "
            "use a positive jitter to regularize"
        )
        self.null_count = int(null_count)
