"""Exception types shared across the solvers and the pipeline."""


class DimensionError(ValueError):
    """Array shapes do not agree."""


class InvalidSizeError(ValueError):
    """A size, count or fraction argument is outside its valid range."""


class TooLargeError(MemoryError):
    """Dense materialization would exceed the memory guard."""


class InfeasibleError(ValueError):
    """The measurements cannot be reproduced by the dictionary."""


class DegenerateInputError(ValueError):
    """The input carries nothing to reconstruct."""
