"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


class MaskNestingError(ValueError):
    """A patch mask (or schedule) violates the deeper-subset-of-shallower rule."""


class NumericOverflowError(ArithmeticError):
    """A computation produced non-finite values."""


class UndefinedStatisticError(ValueError):
    """The requested statistic is undefined on the given input."""


class FormatError(ValueError):
    """A serialized artifact is corrupt, truncated, or of an unknown version."""
