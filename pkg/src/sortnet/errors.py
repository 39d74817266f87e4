"""Exception hierarchy shared by every sortnet module."""


class SortNetError(Exception):
    """Base class for all errors raised by sortnet."""


class ShapeMismatch(SortNetError, ValueError):
    pass


class InvalidGeometry(SortNetError, ValueError):
    pass


class NegativeInput(SortNetError, ValueError):
    pass


class LabelOutOfRange(SortNetError, ValueError):
    pass


class EmptySpec(SortNetError, ValueError):
    pass


class EvenKernel(SortNetError, ValueError):
    pass


class EmptyGrid(SortNetError, ValueError):
    pass


class EmptySplit(SortNetError, ValueError):
    pass


class ZeroVariance(SortNetError, ValueError):
    pass


class TruncatedFile(SortNetError, ValueError):
    pass


class NonFiniteLoss(SortNetError, ArithmeticError):
    pass


class NonFiniteGradient(SortNetError, ArithmeticError):
    pass


class DivergedLoss(SortNetError, ArithmeticError):
    """Training produced a NaN/Inf loss.

    ``metrics`` holds everything recorded up to (and including) the bad
    iteration so callers can still report partial curves.
    """

    def __init__(self, message, metrics=None, iteration=None):
        super().__init__(message)
        self.metrics = metrics
        self.iteration = iteration
