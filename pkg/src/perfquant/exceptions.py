"""Exception hierarchy shared by all modules.

``ValidationError`` marks bad user input (CLI exit code 1); everything else
deriving from ``PerfusionError`` is a runtime failure (exit code 2).
"""


class PerfusionError(Exception):
    """Base class for all errors raised by perfquant."""


class ValidationError(PerfusionError, ValueError):
    """Input data or configuration violates a documented precondition."""


class GridError(ValidationError):
    """Sampling grid is non-uniform, mismatched or does not cover the request."""


class DegenerateRootsError(PerfusionError):
    """The two exponential rates of the residue function coincide."""


class StepSizeError(ValidationError):
    """ODE integration step is too large for the stiffest rate."""


class OutOfRangeError(ValidationError):
    """A signal value cannot be produced by the signal model.

    Attributes
    ----------
    indices : list of int
        Sample indices that were out of range.
    """

    def __init__(self, message, indices=()):
        super().__init__(message)
        self.indices = list(indices)


class ConvergenceError(PerfusionError):
    """An iterative solver failed to converge from every start."""


class SeriesFormatError(ValidationError):
    """A binary series file is malformed."""


class DegenerateDataError(ValidationError):
    """Observed data carry no information (e.g. an all-zero tissue curve)."""
