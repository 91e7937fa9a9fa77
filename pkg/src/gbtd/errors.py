"""Exception types raised by the library."""


class DegenerateReferenceError(ValueError):
    """The reference tensor of a relative error has zero norm."""


class AlsNumericalError(ArithmeticError):
    """A least-squares subproblem of the ALS fit could not be solved."""

    def __init__(self, message, mode=None, term=None):
        super().__init__(message)
        self.mode = mode
        self.term = term


class RefusalError(ValueError):
    """A decomposition does not satisfy the preconditions of a conversion."""


class ArchiveError(ValueError):
    """A tensor file or decomposition archive is malformed."""


class NotationError(ValueError):
    """A network setting string such as ``32x4d @x14`` could not be parsed."""

    def __init__(self, message, position):
        super().__init__(f"{message} (at position {position})")
        self.position = position
