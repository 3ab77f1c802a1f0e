"""Quantitative myocardial perfusion from dynamic contrast-enhanced MR series.

Modules: ``model`` (two-compartment exchange forward model), ``signal``
(signal/T1/concentration conversion), ``nlls`` (multi-start
Levenberg-Marquardt fits), ``bayes`` (Metropolis-Hastings posterior with a
spatial prior), ``rpca``/``moco`` (low-rank plus sparse motion
correction), ``analysis`` (segments, per-vessel statistics, ROC),
``phantom`` (synthetic ground truth), ``io``/``config``/``cli``.
"""

from .exceptions import (
    ConvergenceError,
    DegenerateDataError,
    DegenerateRootsError,
    GridError,
    OutOfRangeError,
    PerfusionError,
    SeriesFormatError,
    StepSizeError,
    ValidationError,
)
from .model import KineticParams, PhysioConstants, SampledCurve, forward_model, ode_oracle
from .nlls import FitBounds, KineticFitter, fit_nlls
from .signal import SequenceParams, SignalConverter

__version__ = "0.1.0"

__all__ = [
    "ConvergenceError",
    "DegenerateDataError",
    "DegenerateRootsError",
    "FitBounds",
    "GridError",
    "KineticFitter",
    "KineticParams",
    "OutOfRangeError",
    "PerfusionError",
    "PhysioConstants",
    "SampledCurve",
    "SequenceParams",
    "SeriesFormatError",
    "SignalConverter",
    "StepSizeError",
    "ValidationError",
    "fit_nlls",
    "forward_model",
    "ode_oracle",
]
