"""Signal intensity <-> T1 <-> gadolinium concentration conversion.

Signal model: saturation-recovery spoiled gradient echo read out after ``n``
excitations,

    S = psi * S0 * [(1 - e^{-TSAT/T1}) a^{n-1} + (1 - e^{-TR/T1}) (1 - a^{n-1}) / (1 - a)]

with ``a = cos(alpha) e^{-TR/T1}``, and the fast-exchange relaxivity relation
``1/T1 = 1/T10 + r1 [Gd]``.
"""

import warnings
from dataclasses import dataclass, replace

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import check_curves
from .exceptions import OutOfRangeError, ValidationError
from .model import SampledCurve

T1_MIN = 1e-3
T1_MAX = 10.0
CLAMP_TOL = 1e-9


@dataclass(frozen=True)
class SequenceParams:
    """Acquisition constants of the saturation-recovery signal equation.

    ``n`` (excitations up to the k-space centre) is not reported for the
    protocol; 40 is used as a configurable default. ``psi`` is the
    receiver scale factor, normally set through :func:`calibrate`.
    """

    TR: float = 0.003
    TSAT: float = 0.120
    alpha: float = 15.0
    n: int = 40
    r1: float = 4.5
    T10: float = 1.2
    S0: float = 1.0
    psi: float = 1.0

    def __post_init__(self):
        for name in ("TR", "TSAT", "T10", "r1", "S0", "psi"):
            value = getattr(self, name)
            if not np.isfinite(value) or value <= 0:
                raise ValidationError(f"{name} must be positive, got {value}")
        if not 0 < self.alpha < 90:
            raise ValidationError(f"flip angle must lie in (0, 90) degrees, got {self.alpha}")
        if int(self.n) != self.n or self.n < 1:
            raise ValidationError(f"n must be a positive integer, got {self.n}")

    def to_dict(self):
        return {
            "TR_s": self.TR,
            "TSAT_s": self.TSAT,
            "alpha_deg": self.alpha,
            "n": int(self.n),
            "r1_L_per_mmol_s": self.r1,
            "T10_s": self.T10,
        }

    @classmethod
    def from_dict(cls, d):
        keys = {"TR_s": "TR", "TSAT_s": "TSAT", "alpha_deg": "alpha", "n": "n",
                "r1_L_per_mmol_s": "r1", "T10_s": "T10"}
        unknown = set(d) - set(keys)
        if unknown:
            raise ValidationError(f"unknown sequence parameter keys: {sorted(unknown)}")
        kwargs = {keys[k]: v for k, v in d.items()}
        if "n" in kwargs:
            kwargs["n"] = int(kwargs["n"])
        return cls(**kwargs)


def _relative_signal(seq, T1):
    """Bracketed part of the signal equation (``psi = S0 = 1``)."""
    T1 = np.asarray(T1, dtype=float)
    e_r = np.exp(-seq.TR / T1)
    a = np.cos(np.deg2rad(seq.alpha)) * e_r
    an = a ** (seq.n - 1)
    return (1.0 - np.exp(-seq.TSAT / T1)) * an + (1.0 - e_r) * (1.0 - an) / (1.0 - a)


def signal_from_T1(seq, T1):
    """Signal intensity for longitudinal relaxation time ``T1`` (seconds)."""
    T1 = np.asarray(T1, dtype=float)
    if np.any(T1 <= 0):
        raise ValidationError("T1 must be positive")
    return seq.psi * seq.S0 * _relative_signal(seq, T1)


def estimate_psi(seq, baseline_signals):
    """Scale factor that makes the model reproduce the mean baseline signal at T10."""
    baseline = np.asarray(baseline_signals, dtype=float)
    if baseline.size == 0:
        raise ValidationError("cannot estimate psi from an empty baseline")
    return float(np.mean(baseline) / (seq.S0 * _relative_signal(seq, seq.T10)))


def calibrate(seq, baseline_signals):
    """Copy of ``seq`` with ``psi`` estimated from pre-contrast samples."""
    return replace(seq, psi=estimate_psi(seq, baseline_signals))


def _invert(seq, rel, xtol):
    """Vectorised bisection for T1 given relative signal ``rel`` (decreasing model)."""
    lo = np.full(rel.shape, T1_MIN)
    hi = np.full(rel.shape, T1_MAX)
    n_iter = int(np.ceil(np.log2((T1_MAX - T1_MIN) / xtol))) + 1
    for _ in range(n_iter):
        mid = 0.5 * (lo + hi)
        above = _relative_signal(seq, mid) > rel
        lo = np.where(above, mid, lo)
        hi = np.where(above, hi, mid)
    return 0.5 * (lo + hi)


def T1_from_signal(seq, s, xtol=1e-10):
    """Invert the signal equation by bisection on [1 ms, 10 s].

    Raises :class:`OutOfRangeError` listing the offending sample indices when
    a signal lies outside the attainable range of the bracket.
    """
    s = np.asarray(s, dtype=float)
    rel = s / (seq.psi * seq.S0)
    upper = _relative_signal(seq, T1_MIN)
    lower = _relative_signal(seq, T1_MAX)
    bad = (rel > upper) | (rel < lower) | ~np.isfinite(rel)
    if np.any(bad):
        idx = np.flatnonzero(bad.ravel())
        raise OutOfRangeError(
            f"{idx.size} signal value(s) outside the attainable range "
            f"[{lower * seq.psi * seq.S0:.6g}, {upper * seq.psi * seq.S0:.6g}] "
            f"at sample index {idx[:10].tolist()}",
            idx,
        )
    return _invert(seq, rel, xtol)


def gd_from_T1(seq, T1, clamp=False):
    """Gadolinium concentration (mmol/L) from T1 via the relaxivity relation."""
    T1 = np.asarray(T1, dtype=float)
    conc = (1.0 / T1 - 1.0 / seq.T10) / seq.r1
    if clamp:
        conc = np.maximum(conc, 0.0)
    return conc


def T1_from_gd(seq, conc):
    return 1.0 / (1.0 / seq.T10 + seq.r1 * np.asarray(conc, dtype=float))


def concentration_from_signal(seq, curve, clamp=True, out_of_range="raise"):
    """Convert a signal curve sample by sample; negative results clamp to 0.

    ``seq.psi`` must already be calibrated (see :func:`calibrate`). The
    output keeps the ``aif`` tag for AIF input and is ``tissue`` otherwise.
    ``out_of_range="clip"`` pins unattainable samples (noise below the
    10 s floor, saturation above the 1 ms ceiling) to the bracket ends
    instead of raising.
    """
    values, n_clamped = _convert(seq, curve.values, clamp, out_of_range)
    if n_clamped:
        warnings.warn(f"{n_clamped} negative concentration sample(s) clamped to 0", stacklevel=2)
    return curve.with_values(values, kind="aif" if curve.kind == "aif" else "tissue")


def clip_to_attainable(seq, s):
    """Clip signals into the range the model reaches on [1 ms, 10 s]; returns (clipped, count)."""
    s = np.asarray(s, dtype=float)
    scale = seq.psi * seq.S0
    lo = _relative_signal(seq, T1_MAX) * scale
    hi = _relative_signal(seq, T1_MIN) * scale
    clipped = np.clip(s, lo, hi)
    return clipped, int(np.count_nonzero(clipped != s))


def _convert(seq, values, clamp, out_of_range="raise"):
    if out_of_range == "clip":
        values, n_clipped = clip_to_attainable(seq, values)
        if n_clipped:
            warnings.warn(f"{n_clipped} signal sample(s) outside the attainable range clipped",
                          stacklevel=3)
    elif out_of_range != "raise":
        raise ValidationError("out_of_range must be 'raise' or 'clip'")
    conc = gd_from_T1(seq, T1_from_signal(seq, values))
    negative = conc < 0
    # bisection round-off leaves baseline samples a hair below zero; those are not counted
    n_clamped = int(np.count_nonzero(conc < -CLAMP_TOL)) if clamp else 0
    if clamp:
        conc = np.where(negative, 0.0, conc)
    return conc, n_clamped


def relative_enhancement(curve, seq, n_baseline=3):
    """Linear approximation ``(R10 / r1) (S - S(0)) / S(0)``; S(0) is the baseline mean."""
    if n_baseline < 1:
        raise ValidationError("n_baseline must be at least 1")
    s0 = float(np.mean(curve.values[:n_baseline]))
    if s0 <= 0:
        raise ValidationError("relative enhancement needs a positive baseline signal")
    conc = (1.0 / seq.T10) / seq.r1 * (curve.values - s0) / s0
    return curve.with_values(conc, kind="aif" if curve.kind == "aif" else "tissue")


def build_dual_bolus_aif(prebolus_aif, scale=10.0, main_bolus_start=0.0):
    """Scale a pre-bolus AIF to main-bolus dose and move its origin to ``main_bolus_start``."""
    if scale <= 0:
        raise ValidationError(f"scale must be positive, got {scale}")
    return SampledCurve(prebolus_aif.times + main_bolus_start, prebolus_aif.values * scale, "aif")


class SignalConverter(TransformerMixin, BaseEstimator):
    """Per-curve signal to concentration conversion.

    ``fit`` estimates one ``psi`` per curve (row) from its first
    ``n_baseline`` samples; ``transform`` inverts the signal equation.

    Parameters
    ----------
    TR, TSAT, alpha_deg, n, r1, T10 : float
        Sequence constants, see :class:`SequenceParams`.
    n_baseline : int
        Number of leading pre-contrast samples used for calibration.
    clamp : bool
        Clamp negative concentrations to zero.
    out_of_range : {"raise", "clip"}
        Handling of samples outside the attainable signal range.
    pooled : bool
        Estimate one ``psi`` from the baselines of all curves (a region
        calibration) instead of one per curve.

    Attributes
    ----------
    psi_ : ndarray of shape (n_curves,)
    n_clamped_ : int
        Number of clamped samples in the last ``transform`` call.
    """

    def __init__(self, TR=0.003, TSAT=0.120, alpha_deg=15.0, n=40, r1=4.5, T10=1.2,
                 n_baseline=3, clamp=True, out_of_range="raise", pooled=False):
        self.TR = TR
        self.TSAT = TSAT
        self.alpha_deg = alpha_deg
        self.n = n
        self.r1 = r1
        self.T10 = T10
        self.n_baseline = n_baseline
        self.clamp = clamp
        self.out_of_range = out_of_range
        self.pooled = pooled

    def _sequence(self):
        return SequenceParams(TR=self.TR, TSAT=self.TSAT, alpha=self.alpha_deg, n=self.n,
                              r1=self.r1, T10=self.T10)

    def fit(self, X, y=None):
        X = check_curves(X)
        if self.n_baseline < 1 or self.n_baseline > X.shape[1]:
            raise ValidationError("n_baseline must lie between 1 and the number of samples")
        seq = self._sequence()
        baseline = np.mean(X[:, : self.n_baseline], axis=1)
        if self.pooled:
            baseline = np.full_like(baseline, baseline.mean())
        self.psi_ = baseline / _relative_signal(seq, seq.T10)
        if np.any(self.psi_ <= 0):
            raise ValidationError("baseline signal must be positive")
        self.n_features_in_ = X.shape[1]
        return self

    def transform(self, X):
        check_is_fitted(self, "psi_")
        X = check_curves(X, self.n_features_in_)
        if X.shape[0] != self.psi_.size:
            raise ValidationError("transform expects the curves passed to fit")
        seq = self._sequence()
        conc, self.n_clamped_ = _convert(seq, X / self.psi_[:, None], self.clamp,
                                         self.out_of_range)
        if self.n_clamped_:
            warnings.warn(f"{self.n_clamped_} negative concentration sample(s) clamped to 0",
                          stacklevel=2)
        return conc

    def inverse_transform(self, C):
        check_is_fitted(self, "psi_")
        C = check_curves(C)
        seq = self._sequence()
        return self.psi_[:, None] * signal_from_T1(seq, T1_from_gd(seq, C))
